//! 3D convolution (cross-correlation) with zero "same" padding, in a dense
//! form and a gathered form that only evaluates selected output voxels. Both
//! lower to matrix products over patch matrices whose row `ci * taps + t`
//! matches the kernel layout `[C_out, C_in, K, K, K]`.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use super::{Backward, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::volume::Dims;

#[derive(Clone, Copy)]
struct Geom {
    dims: Dims,
    c_in: usize,
    c_out: usize,
    ksize: usize,
}

impl Geom {
    #[inline]
    fn radius(&self) -> isize {
        (self.ksize / 2) as isize
    }

    #[inline]
    fn taps(&self) -> usize {
        self.ksize * self.ksize * self.ksize
    }

    #[inline]
    fn rows(&self) -> usize {
        self.c_in * self.taps()
    }

    /// Kernel offsets in tap order.
    fn offsets(&self) -> Vec<[isize; 3]> {
        let r = self.radius();
        let mut out = Vec::with_capacity(self.taps());
        for oz in -r..=r {
            for oy in -r..=r {
                for ox in -r..=r {
                    out.push([oz, oy, ox]);
                }
            }
        }
        out
    }

    /// Planes per dense slab, so a patch matrix has a few thousand columns.
    fn slab(&self) -> usize {
        let [h, w, d] = self.dims.0;
        (4096 / (w * d)).clamp(1, h)
    }
}

fn conv_geom(x: &[usize], k: &[usize], b: &[usize]) -> Result<Geom> {
    let ok = x.len() == 4
        && k.len() == 5
        && b.len() == 1
        && k[1] == x[0]
        && b[0] == k[0]
        && k[2] == k[3]
        && k[3] == k[4]
        && (k[2] == 1 || k[2] == 3);
    if !ok {
        return Err(Error::ShapeMismatch {
            op: "conv3d",
            detail: alloc::format!("input {x:?}, kernel {k:?}, bias {b:?}"),
        });
    }
    Ok(Geom { dims: Dims([x[1], x[2], x[3]]), c_in: x[0], c_out: k[0], ksize: k[2] })
}

/// `C = alpha * A B + beta * C` on strided row-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    (m, k, n): (usize, usize, usize),
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols.max(1) - 1) * cs;
    assert!(k == 0 || last(m, k, rsa, csa) < a.len());
    assert!(k == 0 || last(k, n, rsb, csb) < b.len());
    assert!(last(m, n, rsc, csc) < c.len());
    // SAFETY: the asserts above bound every element the views address.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Valid destination range along the fastest axis for offset `ox`, so that
/// `kk + ox` stays inside `0..n`.
#[inline]
fn row_range(n: usize, ox: isize) -> (usize, usize) {
    let lo = (-ox).max(0) as usize;
    let hi = (n as isize - ox).min(n as isize).max(0) as usize;
    (lo, hi.max(lo))
}

/// Direction of a patch-matrix transfer: fill the matrix from a volume, or
/// add the matrix back into a gradient volume (the transpose).
enum Io<'a> {
    Read(&'a [f64]),
    Add(&'a mut [f64]),
}

/// Patch matrix `[rows, planes * W * D]` of planes `i0..i0 + planes`.
fn im2col(g: Geom, offsets: &[[isize; 3]], mut x: Io, col: &mut [f64], i0: usize, planes: usize) {
    let [h, w, d] = g.dims.0;
    let n = g.dims.len();
    let cols = planes * w * d;
    let taps = offsets.len();
    for ci in 0..g.c_in {
        for (t, &[oz, oy, ox]) in offsets.iter().enumerate() {
            let row = &mut col[(ci * taps + t) * cols..(ci * taps + t + 1) * cols];
            let (lo, hi) = row_range(d, ox);
            for pi in 0..planes {
                let ii = (i0 + pi) as isize + oz;
                for j in 0..w {
                    let dst = (pi * w + j) * d;
                    let jj = j as isize + oy;
                    if ii < 0 || ii >= h as isize || jj < 0 || jj >= w as isize {
                        if let Io::Read(_) = x {
                            row[dst..dst + d].iter_mut().for_each(|v| *v = 0.0);
                        }
                        continue;
                    }
                    let src = ci * n + (ii as usize * w + jj as usize) * d;
                    let s = (lo as isize + ox) as usize;
                    let len = hi - lo;
                    match &mut x {
                        Io::Read(x) => {
                            row[dst..dst + lo].iter_mut().for_each(|v| *v = 0.0);
                            row[dst + lo..dst + hi].copy_from_slice(&x[src + s..src + s + len]);
                            row[dst + hi..dst + d].iter_mut().for_each(|v| *v = 0.0);
                        }
                        Io::Add(x) => {
                            for (xv, cv) in x[src + s..src + s + len].iter_mut().zip(&row[dst + lo..dst + hi]) {
                                *xv += cv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Minimum output channels for the patch-matrix path; narrower layers use
/// row-wise loops, which avoid the patch-matrix traffic.
const GEMM_MIN_OUT: usize = 16;

#[inline]
fn axpy(dst: &mut [f64], w: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += w * s;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn w_index(g: &Geom, co: usize, ci: usize, oz: isize, oy: isize, ox: isize) -> usize {
    let r = g.radius();
    let k = g.ksize;
    (((co * g.c_in + ci) * k + (oz + r) as usize) * k + (oy + r) as usize) * k + (ox + r) as usize
}

fn direct_forward(g: Geom, x: &[f64], k: &[f64], out: &mut [f64]) {
    let [h, w, d] = g.dims.0;
    let n = g.dims.len();
    let r = g.radius();
    for i in 0..h {
        for j in 0..w {
            let row = (i * w + j) * d;
            for co in 0..g.c_out {
                let orow = &mut out[co * n + row..co * n + row + d];
                for ci in 0..g.c_in {
                    for oz in -r..=r {
                        let ii = i as isize + oz;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for oy in -r..=r {
                            let jj = j as isize + oy;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            let src = ci * n + (ii as usize * w + jj as usize) * d;
                            let irow = &x[src..src + d];
                            for ox in -r..=r {
                                let wv = k[w_index(&g, co, ci, oz, oy, ox)];
                                let (lo, hi) = row_range(d, ox);
                                let s = (lo as isize + ox) as usize;
                                axpy(&mut orow[lo..hi], wv, &irow[s..s + (hi - lo)]);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn direct_grad_x(g: Geom, k: &[f64], grad: &[f64], gx: &mut [f64]) {
    let [h, w, d] = g.dims.0;
    let n = g.dims.len();
    let r = g.radius();
    for i in 0..h {
        for j in 0..w {
            let row = (i * w + j) * d;
            for ci in 0..g.c_in {
                let xrow = &mut gx[ci * n + row..ci * n + row + d];
                for co in 0..g.c_out {
                    for oz in -r..=r {
                        let ii = i as isize - oz;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for oy in -r..=r {
                            let jj = j as isize - oy;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            let src = co * n + (ii as usize * w + jj as usize) * d;
                            let grow = &grad[src..src + d];
                            for ox in -r..=r {
                                let wv = k[w_index(&g, co, ci, oz, oy, ox)];
                                // gx[kk] += w * gy[kk - ox]
                                let (lo, hi) = row_range(d, -ox);
                                let s = (lo as isize - ox) as usize;
                                axpy(&mut xrow[lo..hi], wv, &grow[s..s + (hi - lo)]);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn direct_grad_k(g: Geom, x: &[f64], grad: &[f64], gk: &mut [f64]) {
    let [h, w, d] = g.dims.0;
    let n = g.dims.len();
    let r = g.radius();
    for i in 0..h {
        for j in 0..w {
            let row = (i * w + j) * d;
            for co in 0..g.c_out {
                let grow = &grad[co * n + row..co * n + row + d];
                for ci in 0..g.c_in {
                    for oz in -r..=r {
                        let ii = i as isize + oz;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for oy in -r..=r {
                            let jj = j as isize + oy;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            let src = ci * n + (ii as usize * w + jj as usize) * d;
                            let irow = &x[src..src + d];
                            for ox in -r..=r {
                                let (lo, hi) = row_range(d, ox);
                                let s = (lo as isize + ox) as usize;
                                gk[w_index(&g, co, ci, oz, oy, ox)] += dot(&grow[lo..hi], &irow[s..s + (hi - lo)]);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward(g: Geom, x: &[f64], k: &[f64], b: &[f64]) -> Vec<f64> {
    let [h, w, d] = g.dims.0;
    let n = g.dims.len();
    let mut out = vec![0.0; g.c_out * n];
    for co in 0..g.c_out {
        out[co * n..(co + 1) * n].iter_mut().for_each(|v| *v = b[co]);
    }
    let rows = g.rows();
    if g.ksize == 1 {
        gemm((g.c_out, rows, n), k, (rows, 1), x, (n, 1), 1.0, &mut out, (n, 1));
        return out;
    }
    if g.c_out < GEMM_MIN_OUT {
        direct_forward(g, x, k, &mut out);
        return out;
    }
    let offsets = g.offsets();
    let slab = g.slab();
    let mut col = vec![0.0; rows * slab * w * d];
    let mut i0 = 0;
    while i0 < h {
        let planes = slab.min(h - i0);
        let cols = planes * w * d;
        im2col(g, &offsets, Io::Read(x), &mut col[..rows * cols], i0, planes);
        let base = i0 * w * d;
        gemm((g.c_out, rows, cols), k, (rows, 1), &col[..rows * cols], (cols, 1), 1.0, &mut out[base..], (n, 1));
        i0 += planes;
    }
    out
}

struct Conv3d {
    geom: Geom,
}

impl Backward for Conv3d {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let g = self.geom;
        let (x, k) = (inputs[0].data(), inputs[1].data());
        let [h, w, d] = g.dims.0;
        let n = g.dims.len();
        let rows = g.rows();
        let mut gx = needs[0].then(|| vec![0.0; g.c_in * n]);
        let mut gk = needs[1].then(|| vec![0.0; k.len()]);
        if g.ksize == 1 {
            if let Some(gk) = gk.as_mut() {
                gemm((g.c_out, n, rows), grad, (n, 1), x, (1, n), 0.0, gk, (rows, 1));
            }
            if let Some(gx) = gx.as_mut() {
                gemm((rows, g.c_out, n), k, (1, rows), grad, (n, 1), 0.0, gx, (n, 1));
            }
        } else if g.c_out < GEMM_MIN_OUT {
            if let Some(gk) = gk.as_mut() {
                direct_grad_k(g, x, grad, gk);
            }
            if let Some(gx) = gx.as_mut() {
                direct_grad_x(g, k, grad, gx);
            }
        } else {
            let offsets = g.offsets();
            let slab = g.slab();
            let mut col = vec![0.0; rows * slab * w * d];
            let mut i0 = 0;
            while i0 < h {
                let planes = slab.min(h - i0);
                let cols = planes * w * d;
                let base = i0 * w * d;
                let col = &mut col[..rows * cols];
                if let Some(gk) = gk.as_mut() {
                    im2col(g, &offsets, Io::Read(x), col, i0, planes);
                    gemm((g.c_out, cols, rows), &grad[base..], (n, 1), col, (1, cols), 1.0, gk, (rows, 1));
                }
                if let Some(gx) = gx.as_mut() {
                    gemm((rows, g.c_out, cols), k, (1, rows), &grad[base..], (n, 1), 0.0, col, (cols, 1));
                    im2col(g, &offsets, Io::Add(gx), col, i0, planes);
                }
                i0 += planes;
            }
        }
        let gb = needs[2].then(|| (0..g.c_out).map(|co| grad[co * n..(co + 1) * n].iter().sum()).collect());
        vec![gx, gk, gb]
    }
}

/// Columns per gathered patch matrix.
const GATHER_CHUNK: usize = 2048;

/// Patch matrix for the given voxels stored position-major, `[positions.len(), rows]`,
/// zero outside the grid.
fn gather(g: Geom, offsets: &[[isize; 3]], mut x: Io, positions: &[usize], col: &mut [f64]) {
    let n = g.dims.len();
    let rows = g.rows();
    let taps = offsets.len();
    let mut idx = vec![usize::MAX; taps];
    for (p, &pos) in positions.iter().enumerate() {
        let c = g.dims.coords(pos);
        for (t, o) in offsets.iter().enumerate() {
            let q = [c[0] as isize + o[0], c[1] as isize + o[1], c[2] as isize + o[2]];
            let inside = (0..3).all(|a| q[a] >= 0 && q[a] < g.dims.0[a] as isize);
            idx[t] = if inside { g.dims.index(q[0] as usize, q[1] as usize, q[2] as usize) } else { usize::MAX };
        }
        let patch = &mut col[p * rows..(p + 1) * rows];
        for ci in 0..g.c_in {
            let plane = ci * n;
            let slots = &mut patch[ci * taps..(ci + 1) * taps];
            match &mut x {
                Io::Read(x) => {
                    for (slot, &v) in slots.iter_mut().zip(&idx) {
                        *slot = if v == usize::MAX { 0.0 } else { x[plane + v] };
                    }
                }
                Io::Add(x) => {
                    for (slot, &v) in slots.iter().zip(&idx) {
                        if v != usize::MAX {
                            x[plane + v] += *slot;
                        }
                    }
                }
            }
        }
    }
}

struct Conv3dAt {
    geom: Geom,
    positions: Vec<usize>,
}

impl Backward for Conv3dAt {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let g = self.geom;
        let (x, k) = (inputs[0].data(), inputs[1].data());
        let p_count = self.positions.len();
        let rows = g.rows();
        let offsets = g.offsets();
        let mut gx = needs[0].then(|| vec![0.0; x.len()]);
        let mut gk = needs[1].then(|| vec![0.0; k.len()]);
        let mut col = vec![0.0; rows * GATHER_CHUNK.min(p_count)];
        for (chunk, positions) in self.positions.chunks(GATHER_CHUNK).enumerate() {
            let cols = positions.len();
            let col = &mut col[..rows * cols];
            let gsub = &grad[chunk * GATHER_CHUNK..];
            if let Some(gk) = gk.as_mut() {
                gather(g, &offsets, Io::Read(x), positions, col);
                gemm((g.c_out, cols, rows), gsub, (p_count, 1), col, (rows, 1), 1.0, gk, (rows, 1));
            }
            if let Some(gx) = gx.as_mut() {
                gemm((rows, g.c_out, cols), k, (1, rows), gsub, (p_count, 1), 0.0, col, (1, rows));
                gather(g, &offsets, Io::Add(gx), positions, col);
            }
        }
        let gb = needs[2].then(|| (0..g.c_out).map(|co| grad[co * p_count..(co + 1) * p_count].iter().sum()).collect());
        vec![gx, gk, gb]
    }
}

struct Scatter {
    positions: Vec<usize>,
    channels: usize,
}

impl Backward for Scatter {
    fn backward(&self, _: &[&Tensor], output: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let n = output.len() / self.channels;
        let p_count = self.positions.len();
        let mut g = vec![0.0; self.channels * p_count];
        for c in 0..self.channels {
            for (p, &pos) in self.positions.iter().enumerate() {
                g[c * p_count + p] = grad[c * n + pos];
            }
        }
        vec![Some(g)]
    }
}

impl Graph {
    /// Same-padded 3D convolution: `x [C_in,H,W,D]`, `k [C_out,C_in,K,K,K]`
    /// with `K` in {1, 3}, `b [C_out]`.
    pub fn conv3d(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        let geom = conv_geom(self.shape(x), self.shape(k), self.shape(b))?;
        let out = conv_forward(geom, self.value(x).data(), self.value(k).data(), self.value(b).data());
        let [h, w, d] = geom.dims.0;
        let value = Tensor::from_parts(vec![geom.c_out, h, w, d], out);
        self.apply(Box::new(Conv3d { geom }), &[x, k, b], value)
    }

    /// The dense convolution evaluated only at the flat voxel indices in
    /// `positions`; output is `[C_out, P]`.
    pub fn conv3d_at(&mut self, x: Var, k: Var, b: Var, positions: &[usize]) -> Result<Var> {
        let geom = conv_geom(self.shape(x), self.shape(k), self.shape(b))?;
        if positions.iter().any(|&p| p >= geom.dims.len()) {
            return Err(Error::InvalidArgument("conv3d_at position outside the grid".into()));
        }
        let p_count = positions.len();
        let rows = geom.rows();
        let offsets = geom.offsets();
        let (kd, bd) = (self.value(k).data(), self.value(b).data());
        let xd = self.value(x).data();
        let mut out = vec![0.0; geom.c_out * p_count];
        for co in 0..geom.c_out {
            out[co * p_count..(co + 1) * p_count].iter_mut().for_each(|v| *v = bd[co]);
        }
        let mut col = vec![0.0; rows * GATHER_CHUNK.min(p_count)];
        for (chunk, pos) in positions.chunks(GATHER_CHUNK).enumerate() {
            let cols = pos.len();
            let col = &mut col[..rows * cols];
            gather(geom, &offsets, Io::Read(xd), pos, col);
            gemm((geom.c_out, rows, cols), kd, (rows, 1), col, (1, rows), 1.0, &mut out[chunk * GATHER_CHUNK..], (p_count, 1));
        }
        let value = Tensor::from_parts(vec![geom.c_out, p_count], out);
        self.apply(Box::new(Conv3dAt { geom, positions: positions.to_vec() }), &[x, k, b], value)
    }

    /// Places `values [C, P]` at `positions` of a zero `[C, H, W, D]` tensor.
    pub fn scatter(&mut self, values: Var, positions: &[usize], dims: Dims) -> Result<Var> {
        let shape = self.shape(values).to_vec();
        if shape.len() != 2 || shape[1] != positions.len() {
            return Err(Error::ShapeMismatch { op: "scatter", detail: alloc::format!("{shape:?} for {} positions", positions.len()) });
        }
        let n = dims.len();
        let mut seen = vec![false; n];
        for &p in positions {
            if p >= n || core::mem::replace(&mut seen[p], true) {
                return Err(Error::InvalidArgument("scatter positions must be unique and inside the grid".into()));
            }
        }
        let channels = shape[0];
        let src = self.value(values).data();
        let mut out = vec![0.0; channels * n];
        for c in 0..channels {
            for (p, &pos) in positions.iter().enumerate() {
                out[c * n + pos] = src[c * positions.len() + p];
            }
        }
        let [h, w, d] = dims.0;
        let value = Tensor::from_parts(vec![channels, h, w, d], out);
        self.apply(Box::new(Scatter { positions: positions.to_vec(), channels }), &[values], value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_input(c: usize, n: usize) -> Tensor {
        let len = c * n * n * n;
        Tensor::new(&[c, n, n, n], (0..len).map(|i| ((i * 37 % 101) as f64) / 50.0 - 1.0).collect()).unwrap()
    }

    #[test]
    fn identity_kernel() {
        let mut g = Graph::new();
        let x = g.leaf(ramp_input(1, 5), false);
        let mut kd = vec![0.0; 27];
        kd[13] = 1.0;
        let k = g.leaf(Tensor::new(&[1, 1, 3, 3, 3], kd).unwrap(), false);
        let b = g.leaf(Tensor::zeros(&[1]), false);
        let y = g.conv3d(x, k, b).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let kz = g.leaf(Tensor::zeros(&[2, 1, 3, 3, 3]), false);
        let bz = g.leaf(Tensor::zeros(&[2]), false);
        let y = g.conv3d(x, kz, bz).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let bad = g.leaf(Tensor::zeros(&[1, 3, 3, 3, 3]), false);
        assert!(g.conv3d(x, bad, b).is_err());
    }

    #[test]
    fn gathered_matches_dense() {
        let mut g = Graph::new();
        let x = g.leaf(ramp_input(2, 4), false);
        let kd: Vec<f64> = (0..3 * 2 * 27).map(|i| ((i * 13 % 17) as f64 - 8.0) / 10.0).collect();
        let k = g.leaf(Tensor::new(&[3, 2, 3, 3, 3], kd).unwrap(), false);
        let b = g.leaf(Tensor::new(&[3], vec![0.1, -0.2, 0.3]).unwrap(), false);
        let dense = g.conv3d(x, k, b).unwrap();
        let positions = [0usize, 5, 21, 63, 42];
        let sparse = g.conv3d_at(x, k, b, &positions).unwrap();
        for co in 0..3 {
            for (p, &pos) in positions.iter().enumerate() {
                let a = g.value(dense).data()[co * 64 + pos];
                let s = g.value(sparse).data()[co * 5 + p];
                assert!((a - s).abs() < 1e-12);
            }
        }
    }
}
