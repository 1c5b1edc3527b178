//! Monotone Bézier intensity transforms with random contrast inversion.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Entries of the intensity lookup table.
pub const LUT_SIZE: usize = 1024;
/// Parameter samples used to trace the curve before tabulation.
pub const CURVE_SAMPLES: usize = 4096;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct AugmentationConfig {
    /// Curve degree: control-point count minus one.
    pub n: usize,
    /// Inversion threshold; a draw `p <= delta` inverts, `delta = 0` never does.
    pub delta: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig { n: 3, delta: 0.5 }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::InvalidArgument(alloc::format!("augmentation config {self:?}: need n >= 1, delta in [0, 1]")));
        }
        Ok(())
    }
}

/// Bernstein basis polynomial `C(n,i) t^i (1-t)^(n-i)`.
pub fn bernstein(i: usize, n: usize, t: f64) -> Result<f64> {
    if i > n {
        return Err(Error::InvalidArgument(alloc::format!("bernstein index {i} exceeds degree {n}")));
    }
    let mut binom = 1.0;
    for k in 0..i {
        binom = binom * (n - k) as f64 / (k + 1) as f64;
    }
    Ok(binom * libm::pow(t, i as f64) * libm::pow(1.0 - t, (n - i) as f64))
}

/// Serializable description of a transform; the table is rebuilt on load.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BezierRecord {
    pub control_points: Vec<[f64; 2]>,
    pub inverted: bool,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BezierTransform {
    control_points: Vec<[f64; 2]>,
    inverted: bool,
    seed: Option<u64>,
    lut: Vec<f64>,
}

impl BezierTransform {
    /// Builds the table from control points sorted in both coordinates with
    /// pinned endpoints `(0,0)` and `(1,1)`.
    pub fn new(control_points: Vec<[f64; 2]>, inverted: bool) -> Result<Self> {
        let n = control_points.len();
        let sorted = control_points.windows(2).all(|w| w[0][0] <= w[1][0] && w[0][1] <= w[1][1]);
        let inside = control_points.iter().flatten().all(|c| (0.0..=1.0).contains(c));
        if n < 2 || control_points[0] != [0.0, 0.0] || control_points[n - 1] != [1.0, 1.0] || !sorted || !inside {
            return Err(Error::InvalidArgument(
                "control points must lie in [0,1]^2, be sorted in both coordinates and run from (0,0) to (1,1)".into(),
            ));
        }
        let lut = tabulate(&control_points);
        Ok(BezierTransform { control_points, inverted, seed: None, lut })
    }

    pub fn identity() -> Self {
        Self::new(vec![[0.0, 0.0], [1.0, 1.0]], false).unwrap()
    }

    /// Draws `n - 1` interior points uniformly in the unit square, sorts
    /// both coordinates independently, then decides inversion.
    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentationConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut inner: Vec<[f64; 2]> = (0..cfg.n - 1).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect();
        inner.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
        let mut ys: Vec<f64> = inner.iter().map(|p| p[1]).collect();
        ys.sort_by(f64::total_cmp);
        for (p, y) in inner.iter_mut().zip(ys) {
            p[1] = y;
        }
        let mut points = Vec::with_capacity(cfg.n + 1);
        points.push([0.0, 0.0]);
        points.extend(inner);
        points.push([1.0, 1.0]);
        let p: f64 = rng.random();
        let inverted = cfg.delta > 0.0 && p <= cfg.delta;
        Self::new(points, inverted)
    }

    /// [`BezierTransform::sample`] from a dedicated seeded generator; the seed
    /// is kept in the record.
    pub fn sample_seeded(cfg: &AugmentationConfig, seed: u64) -> Result<Self> {
        let mut t = Self::sample(cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
        t.seed = Some(seed);
        Ok(t)
    }

    pub fn control_points(&self) -> &[[f64; 2]] {
        &self.control_points
    }

    pub fn inverted(&self) -> bool {
        self.inverted
    }

    pub fn lut(&self) -> &[f64] {
        &self.lut
    }

    /// Curve height at curve abscissa `v`, by table interpolation. `v` is
    /// clamped to `[0, 1]`; inversion is not applied here.
    pub fn eval(&self, v: f64) -> f64 {
        let p = v.clamp(0.0, 1.0) * (LUT_SIZE - 1) as f64;
        let i = (libm::floor(p) as usize).min(LUT_SIZE - 2);
        let t = p - i as f64;
        self.lut[i] * (1.0 - t) + self.lut[i + 1] * t
    }

    /// Applies the transform to one intensity, inverting first if flagged.
    pub fn map(&self, v: f64) -> f64 {
        if self.inverted {
            self.eval(1.0 - v)
        } else {
            self.eval(v)
        }
    }

    /// Voxelwise intensity transform; geometry is untouched.
    pub fn apply(&self, v: &Volume) -> Result<Volume> {
        if !v.is_unit_range() {
            return Err(Error::InvalidArgument("augmentation input must be normalized to [0, 1]".into()));
        }
        let data = v.data.iter().map(|&x| self.map(x)).collect();
        Ok(Volume { dims: v.dims, spacing: v.spacing, data })
    }

    pub fn record(&self) -> BezierRecord {
        BezierRecord { control_points: self.control_points.clone(), inverted: self.inverted, seed: self.seed }
    }

    pub fn from_record(r: &BezierRecord) -> Result<Self> {
        let mut t = Self::new(r.control_points.clone(), r.inverted)?;
        t.seed = r.seed;
        Ok(t)
    }
}

fn curve_point(points: &[[f64; 2]], t: f64) -> [f64; 2] {
    let n = points.len() - 1;
    let mut out = [0.0; 2];
    for (i, p) in points.iter().enumerate() {
        let b = bernstein(i, n, t).unwrap();
        out[0] += b * p[0];
        out[1] += b * p[1];
    }
    out
}

/// Traces the curve at evenly spaced parameters and resamples it at evenly
/// spaced abscissae by linear interpolation.
fn tabulate(points: &[[f64; 2]]) -> Vec<f64> {
    let curve: Vec<[f64; 2]> =
        (0..CURVE_SAMPLES).map(|k| curve_point(points, k as f64 / (CURVE_SAMPLES - 1) as f64)).collect();
    let mut lut = vec![0.0; LUT_SIZE];
    let mut k = 0;
    let mut prev = 0.0f64;
    for (j, slot) in lut.iter_mut().enumerate() {
        let x = j as f64 / (LUT_SIZE - 1) as f64;
        while k + 2 < CURVE_SAMPLES && curve[k + 1][0] < x {
            k += 1;
        }
        let (a, b) = (curve[k], curve[k + 1]);
        let span = b[0] - a[0];
        let y = if span > 0.0 { a[1] + (b[1] - a[1]) * ((x - a[0]) / span).clamp(0.0, 1.0) } else { b[1] };
        // guards rounding in the parametric trace
        prev = prev.max(y);
        *slot = prev;
    }
    lut[0] = 0.0;
    lut[LUT_SIZE - 1] = 1.0;
    lut
}
