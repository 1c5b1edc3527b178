use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use super::{Backward, Graph, Tensor, Var};
use crate::error::{Error, Result};

struct Add;

impl Backward for Add {
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        needs.iter().map(|&n| n.then(|| grad.to_vec())).collect()
    }
}

struct Mul;

impl Backward for Mul {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        vec![
            needs[0].then(|| grad.iter().zip(b).map(|(g, y)| g * y).collect()),
            needs[1].then(|| grad.iter().zip(a).map(|(g, x)| g * x).collect()),
        ]
    }
}

struct Scale(f64);

impl Backward for Scale {
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad.iter().map(|g| g * self.0).collect())]
    }
}

struct Sum;

impl Backward for Sum {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![grad[0]; inputs[0].len()])]
    }
}

struct LeakyRelu(f64);

impl Backward for LeakyRelu {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0].data();
        vec![Some(grad.iter().zip(x).map(|(&g, &x)| if x > 0.0 { g } else { self.0 * g }).collect())]
    }
}

struct Linear {
    rows: usize,
    c_in: usize,
    c_out: usize,
}

impl Backward for Linear {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (x, w) = (inputs[0].data(), inputs[1].data());
        let (ci, co) = (self.c_in, self.c_out);
        let gx = needs[0].then(|| {
            let mut gx = vec![0.0; self.rows * ci];
            for r in 0..self.rows {
                let gy = &grad[r * co..(r + 1) * co];
                let out = &mut gx[r * ci..(r + 1) * ci];
                for (o, &g) in gy.iter().enumerate() {
                    for (dst, &wv) in out.iter_mut().zip(&w[o * ci..(o + 1) * ci]) {
                        *dst += g * wv;
                    }
                }
            }
            gx
        });
        let gw = needs[1].then(|| {
            let mut gw = vec![0.0; co * ci];
            for r in 0..self.rows {
                let xr = &x[r * ci..(r + 1) * ci];
                for o in 0..co {
                    let g = grad[r * co + o];
                    for (dst, &xv) in gw[o * ci..(o + 1) * ci].iter_mut().zip(xr) {
                        *dst += g * xv;
                    }
                }
            }
            gw
        });
        let gb = needs[2].then(|| {
            let mut gb = vec![0.0; co];
            for r in 0..self.rows {
                for o in 0..co {
                    gb[o] += grad[r * co + o];
                }
            }
            gb
        });
        vec![gx, gw, gb]
    }
}

struct Reshape;

impl Backward for Reshape {
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad.to_vec())]
    }
}

/// Maps every flat output index to its flat input index.
fn permutation_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for a in (0..rank.saturating_sub(1)).rev() {
        in_strides[a] = in_strides[a + 1] * shape[a + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        map.push(src);
        for a in (0..rank).rev() {
            counter[a] += 1;
            src += strides[a];
            if counter[a] < out_shape[a] {
                break;
            }
            src -= strides[a] * out_shape[a];
            counter[a] = 0;
        }
    }
    map
}

struct Permute {
    map: Vec<usize>,
}

impl Backward for Permute {
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let mut g = vec![0.0; grad.len()];
        for (o, &i) in self.map.iter().enumerate() {
            g[i] = grad[o];
        }
        vec![Some(g)]
    }
}

struct Concat {
    outer: usize,
    inner: usize,
    sizes: Vec<usize>,
}

impl Backward for Concat {
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let total: usize = self.sizes.iter().sum();
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.sizes.len());
        for (t, &s) in self.sizes.iter().enumerate() {
            if needs[t] {
                let block = s * self.inner;
                let mut g = Vec::with_capacity(self.outer * block);
                for o in 0..self.outer {
                    let start = (o * total + offset) * self.inner;
                    g.extend_from_slice(&grad[start..start + block]);
                }
                out.push(Some(g));
            } else {
                out.push(None);
            }
            offset += s;
        }
        out
    }
}

fn shape_err(op: &'static str, detail: alloc::string::String) -> Error {
    Error::ShapeMismatch { op, detail }
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", alloc::format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.apply(Box::new(Add), &[a, b], value)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", alloc::format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.apply(Box::new(Mul), &[a, b], value)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * s).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.apply(Box::new(Scale(s)), &[a], value)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Box::new(Sum), &[a], Tensor::scalar(s))
    }

    /// `y = x` for `x > 0`, `slope * x` otherwise.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::InvalidArgument(alloc::format!("leaky relu slope {slope} outside (0, 1)")));
        }
        let data = self.value(x).data().iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), data);
        self.apply(Box::new(LeakyRelu(slope)), &[x], value)
    }

    /// Affine map along the trailing axis: `x[..., C_in] -> x W^T + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let c_in = *xs.last().unwrap();
        if ws.len() != 2 || ws[1] != c_in || self.shape(b) != [ws[0]] {
            return Err(shape_err("linear", alloc::format!("x {xs:?}, W {ws:?}, b {:?}", self.shape(b))));
        }
        let c_out = ws[0];
        let rows = self.value(x).len() / c_in;
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; rows * c_out];
        for r in 0..rows {
            let xr = &xd[r * c_in..(r + 1) * c_in];
            for o in 0..c_out {
                let mut acc = bd[o];
                for (a, bv) in xr.iter().zip(&wd[o * c_in..(o + 1) * c_in]) {
                    acc += a * bv;
                }
                out[r * c_out + o] = acc;
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = c_out;
        self.apply(Box::new(Linear { rows, c_in, c_out }), &[x, w, b], Tensor::from_parts(shape, out))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() || shape.is_empty() || shape.len() > 5 {
            return Err(shape_err("reshape", alloc::format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let value = Tensor::from_parts(shape.to_vec(), self.value(x).data().to_vec());
        self.apply(Box::new(Reshape), &[x], value)
    }

    /// Axis permutation; output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || core::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", alloc::format!("perm {perm:?} for shape {shape:?}")));
        }
        let map = permutation_map(&shape, perm);
        let src = self.value(x).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        self.apply(Box::new(Permute { map }), &[x], Tensor::from_parts(out_shape, data))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", alloc::format!("axis {axis} for shape {first:?}")));
        }
        let mut sizes = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len() || (0..s.len()).any(|a| a != axis && s[a] != first[a]) {
                return Err(shape_err("concat", alloc::format!("{first:?} vs {s:?} on axis {axis}")));
            }
            sizes.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &s) in xs.iter().zip(&sizes) {
                let block = s * inner;
                data.extend_from_slice(&self.value(x).data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.apply(Box::new(Concat { outer, inner, sizes }), xs, Tensor::from_parts(shape, data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaky_relu_values() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[2], vec![2.0, -1.0]).unwrap(), false);
        let y = g.leaky_relu(x, 0.2).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, -0.2]);
        assert!(g.leaky_relu(x, 1.5).is_err());
    }

    #[test]
    fn linear_values() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap(), false);
        let w = g.leaf(Tensor::new(&[2, 2], vec![1.0, 1.0, 0.0, 1.0]).unwrap(), false);
        let b = g.leaf(Tensor::zeros(&[2]), false);
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 2.0]);
        let eye = g.leaf(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(), false);
        let y = g.linear(x, eye, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);
        let bad = g.leaf(Tensor::zeros(&[2, 3]), false);
        assert!(g.linear(x, bad, b).is_err());
    }

    #[test]
    fn permute_and_concat_layout() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(), false);
        let t = g.permute(x, &[1, 0]).unwrap();
        assert_eq!(g.shape(t), &[3, 2]);
        assert_eq!(g.value(t).data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let y = g.leaf(Tensor::new(&[2, 1], vec![9.0, 8.0]).unwrap(), false);
        let c = g.concat(&[x, y], 1).unwrap();
        assert_eq!(g.value(c).data(), &[0.0, 1.0, 2.0, 9.0, 3.0, 4.0, 5.0, 8.0]);
    }
}
