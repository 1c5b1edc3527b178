//! Separable per-axis resampling: anti-aliased stride-2 pooling and trilinear
//! resizing. Each pass is a sparse linear map along one spatial axis, so the
//! backward pass is its transpose.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use super::{Backward, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::volume::{aligned_coord, Dims};

/// Output index -> list of (source index, weight) along one axis.
type Taps = Vec<Vec<(usize, f64)>>;

fn blur_taps(n: usize) -> Taps {
    let m = n.div_ceil(2);
    (0..m)
        .map(|j| {
            let c = 2 * j;
            let lo = c.saturating_sub(1);
            let hi = (c + 1).min(n - 1);
            vec![(lo, 0.25), (c, 0.5), (hi, 0.25)]
        })
        .collect()
}

fn linear_taps(n: usize, m: usize) -> Taps {
    (0..m)
        .map(|j| {
            if n == 1 {
                return vec![(0, 1.0)];
            }
            let p = aligned_coord(j, n, m);
            let i0 = (libm::floor(p) as usize).min(n - 2);
            let t = p - i0 as f64;
            vec![(i0, 1.0 - t), (i0 + 1, t)]
        })
        .collect()
}

/// One axis pass over a tensor viewed as `[outer, n, inner]`.
struct AxisPass {
    outer: usize,
    n_in: usize,
    inner: usize,
    taps: Taps,
}

impl AxisPass {
    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let m = self.taps.len();
        let mut out = vec![0.0; self.outer * m * self.inner];
        for o in 0..self.outer {
            for (j, taps) in self.taps.iter().enumerate() {
                let dst = &mut out[(o * m + j) * self.inner..(o * m + j + 1) * self.inner];
                for &(s, w) in taps {
                    let src = &x[(o * self.n_in + s) * self.inner..(o * self.n_in + s + 1) * self.inner];
                    for (d, v) in dst.iter_mut().zip(src) {
                        *d += w * v;
                    }
                }
            }
        }
        out
    }

    fn transpose(&self, g: &[f64]) -> Vec<f64> {
        let m = self.taps.len();
        let mut out = vec![0.0; self.outer * self.n_in * self.inner];
        for o in 0..self.outer {
            for (j, taps) in self.taps.iter().enumerate() {
                let src = &g[(o * m + j) * self.inner..(o * m + j + 1) * self.inner];
                for &(s, w) in taps {
                    let dst = &mut out[(o * self.n_in + s) * self.inner..(o * self.n_in + s + 1) * self.inner];
                    for (d, v) in dst.iter_mut().zip(src) {
                        *d += w * v;
                    }
                }
            }
        }
        out
    }
}

struct Separable {
    passes: Vec<AxisPass>,
}

impl Backward for Separable {
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let mut g = grad.to_vec();
        for pass in self.passes.iter().rev() {
            g = pass.transpose(&g);
        }
        vec![Some(g)]
    }
}

fn spatial_shape(op: &'static str, shape: &[usize]) -> Result<(usize, Dims)> {
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch { op, detail: alloc::format!("expected [C,H,W,D], got {shape:?}") });
    }
    Ok((shape[0], Dims([shape[1], shape[2], shape[3]])))
}

impl Graph {
    fn separable(&mut self, x: Var, channels: usize, dims: Dims, taps: [Taps; 3]) -> Result<Var> {
        let mut cur_dims = dims.0;
        let mut passes = Vec::with_capacity(3);
        let mut data = self.value(x).data().to_vec();
        for (axis, t) in taps.into_iter().enumerate() {
            let outer = channels * cur_dims[..axis].iter().product::<usize>();
            let inner: usize = cur_dims[axis + 1..].iter().product();
            let pass = AxisPass { outer, n_in: cur_dims[axis], inner, taps: t };
            data = pass.forward(&data);
            cur_dims[axis] = pass.taps.len();
            passes.push(pass);
        }
        let value = Tensor::from_parts(vec![channels, cur_dims[0], cur_dims[1], cur_dims[2]], data);
        self.apply(Box::new(Separable { passes }), &[x], value)
    }

    /// Binomial `(1,2,1)/4` blur per axis with border replication followed by
    /// stride-2 subsampling: `[C,H,W,D] -> [C,ceil(H/2),ceil(W/2),ceil(D/2)]`.
    pub fn blurpool3d(&mut self, x: Var) -> Result<Var> {
        let (c, dims) = spatial_shape("blurpool3d", self.shape(x))?;
        if dims.0.iter().any(|&n| n < 2) {
            return Err(Error::InvalidDims { dims, reason: "blurpool needs at least 2 voxels per axis" });
        }
        let taps = [blur_taps(dims.0[0]), blur_taps(dims.0[1]), blur_taps(dims.0[2])];
        self.separable(x, c, dims, taps)
    }

    /// Trilinear resize with aligned corners, per channel.
    pub fn trilinear_resize(&mut self, x: Var, new_dims: Dims) -> Result<Var> {
        let (c, dims) = spatial_shape("trilinear_resize", self.shape(x))?;
        new_dims.ensure_positive()?;
        let taps = [
            linear_taps(dims.0[0], new_dims.0[0]),
            linear_taps(dims.0[1], new_dims.0[1]),
            linear_taps(dims.0[2], new_dims.0[2]),
        ];
        self.separable(x, c, dims, taps)
    }
}
