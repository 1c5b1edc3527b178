//! Central finite-difference checks for gradients w.r.t. a displacement field.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::volume::{Dims, DisplacementField};

/// A field whose displacements keep every sample point at least 0.1 voxel
/// away from lattice planes, so trilinear kinks stay outside the stencil.
pub(crate) fn smooth_random_field(dims: Dims, amplitude: f64, seed: u64) -> DisplacementField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..3 * dims.len())
        .map(|_| {
            let whole = rng.random_range(-amplitude..=amplitude).round();
            let frac = rng.random_range(0.15..0.85);
            whole + frac
        })
        .collect();
    DisplacementField::new(dims, data).unwrap()
}

/// Joint normwise error between `analytic` and central differences of `f`,
/// probing at most `probes` evenly strided entries.
pub(crate) fn check_field(phi: &DisplacementField, analytic: &[f64], probes: usize, f: impl Fn(&DisplacementField) -> f64) -> f64 {
    let h = 1e-5;
    let stride = analytic.len().div_ceil(probes.min(analytic.len()));
    let (mut err, mut scale) = (0.0f64, 1e-12f64);
    let mut p = phi.clone();
    let probed: Vec<usize> = (0..analytic.len()).step_by(stride).collect();
    for i in probed {
        let orig = p.data[i];
        p.data[i] = orig + h;
        let up = f(&p);
        p.data[i] = orig - h;
        let down = f(&p);
        p.data[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        err = err.max((numeric - analytic[i]).abs());
        scale = scale.max(numeric.abs()).max(analytic[i].abs());
    }
    err / scale
}
