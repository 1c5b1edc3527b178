//! Central finite-difference checks for every tape operation.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::volume::Dims;

pub(crate) fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Normwise relative error between the tape gradient and central finite
/// differences of `f`, taken jointly over all inputs: the largest absolute
/// deviation divided by the largest gradient magnitude.
pub(crate) fn check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    check_sampled(inputs, usize::MAX, f)
}

/// As [`check`], probing at most `probes` evenly strided entries per input.
pub(crate) fn check_sampled<F>(inputs: &[Tensor], probes: usize, f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = f(&mut g, &vars);
        g.value(out).data()[0]
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars);
    g.backward(out).unwrap();
    let h = 1e-5;
    let (mut worst_err, mut worst_scale) = (0.0f64, 0.0f64);
    for (which, t) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[which]).map(|s| s.to_vec()).unwrap_or_else(|| alloc::vec![0.0; t.len()]);
        let stride = t.len().div_ceil(probes.min(t.len()));
        let probed: Vec<usize> = (0..t.len()).step_by(stride).collect();
        let analytic: Vec<f64> = probed.iter().map(|&i| analytic[i]).collect();
        let mut numeric = Vec::with_capacity(probed.len());
        for &i in &probed {
            let mut vals = inputs.to_vec();
            vals[which].data_mut()[i] += h;
            let up = eval(&vals);
            vals[which].data_mut()[i] -= 2.0 * h;
            let down = eval(&vals);
            numeric.push((up - down) / (2.0 * h));
        }
        let scale = numeric.iter().chain(&analytic).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        let err = analytic.iter().zip(&numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        worst_err = worst_err.max(err);
        worst_scale = worst_scale.max(scale);
    }
    worst_err / worst_scale
}

/// `sum(out * w)` for a fixed random weight tensor, so every output element
/// contributes a distinct sensitivity.
pub(crate) fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_tensor(&mut rng, &g.shape(out).to_vec());
    let w = g.constant(w);
    let p = g.mul(out, w).unwrap();
    g.sum(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOL: f64 = 1e-4;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn conv3d_gradients() {
        let mut r = rng();
        let inputs = [random_tensor(&mut r, &[1, 4, 4, 4]), random_tensor(&mut r, &[1, 1, 3, 3, 3]), random_tensor(&mut r, &[1])];
        let err = check(&inputs, |g, v| {
            let y = g.conv3d(v[0], v[1], v[2]).unwrap();
            weighted_sum(g, y, 1)
        });
        assert!(err < TOL, "conv3d rel err {err}");

        let inputs = [random_tensor(&mut r, &[2, 3, 4, 5]), random_tensor(&mut r, &[3, 2, 3, 3, 3]), random_tensor(&mut r, &[3])];
        let err = check(&inputs, |g, v| {
            let y = g.conv3d(v[0], v[1], v[2]).unwrap();
            weighted_sum(g, y, 2)
        });
        assert!(err < TOL, "multi-channel conv3d rel err {err}");

        let inputs = [random_tensor(&mut r, &[3, 3, 3, 3]), random_tensor(&mut r, &[2, 3, 1, 1, 1]), random_tensor(&mut r, &[2])];
        let err = check(&inputs, |g, v| {
            let y = g.conv3d(v[0], v[1], v[2]).unwrap();
            weighted_sum(g, y, 3)
        });
        assert!(err < TOL, "1x1x1 conv3d rel err {err}");
    }

    #[test]
    fn gathered_conv_and_scatter_gradients() {
        let mut r = rng();
        let inputs = [
            random_tensor(&mut r, &[2, 4, 4, 4]),
            random_tensor(&mut r, &[3, 2, 3, 3, 3]),
            random_tensor(&mut r, &[3]),
            random_tensor(&mut r, &[2, 3, 3, 3, 3]),
            random_tensor(&mut r, &[2]),
        ];
        let first = [0usize, 1, 5, 7, 21, 22, 26, 42, 63];
        let second = [5usize, 21, 22];
        let err = check(&inputs, |g, v| {
            let y = g.conv3d_at(v[0], v[1], v[2], &first).unwrap();
            let dense = g.scatter(y, &first, Dims::cube(4)).unwrap();
            let z = g.conv3d_at(dense, v[3], v[4], &second).unwrap();
            weighted_sum(g, z, 4)
        });
        assert!(err < TOL, "conv3d_at/scatter rel err {err}");
    }

    #[test]
    fn leaky_relu_gradient() {
        let mut r = rng();
        let mut x = random_tensor(&mut r, &[3, 4, 5]);
        for v in x.data_mut() {
            if v.abs() < 1e-3 {
                *v = 0.5;
            }
        }
        let err = check(&[x], |g, v| {
            let y = g.leaky_relu(v[0], 0.2).unwrap();
            weighted_sum(g, y, 5)
        });
        assert!(err < TOL, "leaky relu rel err {err}");
    }

    #[test]
    fn blurpool_and_resize_gradients() {
        let mut r = rng();
        let x = random_tensor(&mut r, &[2, 5, 4, 6]);
        let err = check(&[x.clone()], |g, v| {
            let y = g.blurpool3d(v[0]).unwrap();
            weighted_sum(g, y, 6)
        });
        assert!(err < TOL, "blurpool rel err {err}");
        let err = check(&[x], |g, v| {
            let y = g.trilinear_resize(v[0], Dims::new(7, 3, 8)).unwrap();
            weighted_sum(g, y, 7)
        });
        assert!(err < TOL, "trilinear resize rel err {err}");
    }

    #[test]
    fn linear_and_layout_gradients() {
        let mut r = rng();
        let inputs = [random_tensor(&mut r, &[3, 2, 4]), random_tensor(&mut r, &[5, 4]), random_tensor(&mut r, &[5])];
        let err = check(&inputs, |g, v| {
            let y = g.linear(v[0], v[1], v[2]).unwrap();
            weighted_sum(g, y, 8)
        });
        assert!(err < TOL, "linear rel err {err}");

        let inputs = [random_tensor(&mut r, &[2, 3, 4]), random_tensor(&mut r, &[2, 1, 4])];
        let err = check(&inputs, |g, v| {
            let c = g.concat(&[v[0], v[1]], 1).unwrap();
            let p = g.permute(c, &[2, 0, 1]).unwrap();
            let s = g.reshape(p, &[4, 8]).unwrap();
            let m = g.mul(s, s).unwrap();
            let a = g.add(m, s).unwrap();
            let a = g.scale(a, 0.5).unwrap();
            weighted_sum(g, a, 9)
        });
        assert!(err < TOL, "layout ops rel err {err}");
    }
}
