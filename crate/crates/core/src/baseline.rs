//! Baseline similarity measures: the MIND self-similarity descriptor with an
//! SSD metric, and Parzen-window normalized mutual information.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::masrnet::NeighbourhoodLayout;
use crate::volume::{warp_with_grad, Dims, DisplacementField, FeatureField, Volume};

pub const MIND_CHANNELS: usize = 12;
/// Floor applied to the MIND variance estimate.
pub const MIND_VARIANCE_FLOOR: f64 = 1e-6;
const PATCH_RADIUS: isize = 1;

/// MIND descriptor over the direct six-neighbourhood: for each of the twelve
/// non-opposite neighbour pairs, the SSD between the 3x3x3 patches centred on
/// the two neighbours (border replication), normalized by the floored mean
/// of the twelve distances and exponentiated.
pub fn mind(v: &Volume) -> FeatureField {
    let dims = v.dims;
    let layout = NeighbourhoodLayout::direct();
    let mut out = vec![0.0; dims.len() * MIND_CHANNELS];
    let mut patch = [[0.0; 27]; 6];
    for idx in 0..dims.len() {
        let c = dims.coords(idx);
        for (n, o) in layout.offsets.iter().enumerate() {
            let mut t = 0;
            for a in -PATCH_RADIUS..=PATCH_RADIUS {
                for b in -PATCH_RADIUS..=PATCH_RADIUS {
                    for e in -PATCH_RADIUS..=PATCH_RADIUS {
                        patch[n][t] = v.data[clamped(dims, c, [o[0] + a, o[1] + b, o[2] + e])];
                        t += 1;
                    }
                }
            }
        }
        let mut d = [0.0; MIND_CHANNELS];
        for (j, &(a, b)) in layout.pairs.iter().enumerate() {
            d[j] = patch[a].iter().zip(&patch[b]).map(|(x, y)| (x - y) * (x - y)).sum();
        }
        let var = (d.iter().sum::<f64>() / MIND_CHANNELS as f64).max(MIND_VARIANCE_FLOOR);
        for j in 0..MIND_CHANNELS {
            out[idx * MIND_CHANNELS + j] = libm::exp(-d[j] / var);
        }
    }
    FeatureField { dims, channels: MIND_CHANNELS, data: out }
}

#[inline]
fn clamped(dims: Dims, c: [usize; 3], o: [isize; 3]) -> usize {
    dims.clamped_index(c, o)
}

fn ensure_compatible(f: &FeatureField, m: &FeatureField, phi: &DisplacementField) -> Result<()> {
    f.dims.ensure_same(m.dims)?;
    f.dims.ensure_same(phi.dims)?;
    if f.channels != m.channels {
        return Err(Error::ShapeMismatch {
            op: "descriptor metric",
            detail: alloc::format!("{} vs {} channels", f.channels, m.channels),
        });
    }
    Ok(())
}

/// Mean over voxels and channels of `(f(x) - m(x + phi(x)))^2`.
pub fn mind_ssd(f: &FeatureField, m: &FeatureField, phi: &DisplacementField) -> Result<f64> {
    Ok(mind_ssd_grad(f, m, phi)?.0)
}

/// [`mind_ssd`] and its gradient w.r.t. the displacement, laid out like the
/// field data.
pub fn mind_ssd_grad(f: &FeatureField, m: &FeatureField, phi: &DisplacementField) -> Result<(f64, Vec<f64>)> {
    ensure_compatible(f, m, phi)?;
    let (warped, dw) = warp_with_grad(&m.data, m.dims, m.channels, phi);
    let count = f.data.len() as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; 3 * f.dims.len()];
    for (i, (&a, &b)) in f.data.iter().zip(&warped).enumerate() {
        let r = a - b;
        value += r * r;
        let v = i / f.channels;
        for ax in 0..3 {
            grad[3 * v + ax] -= 2.0 * r * dw[i][ax] / count;
        }
    }
    Ok((value / count, grad))
}

/// Parzen-window settings for [`nmi`].
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct NmiConfig {
    pub bins: usize,
    /// Width of the cubic B-spline window, in bins.
    pub parzen_sigma: f64,
}

impl Default for NmiConfig {
    fn default() -> Self {
        NmiConfig { bins: 32, parzen_sigma: 1.0 }
    }
}

impl NmiConfig {
    /// Empty bins kept at each end so that windows never leave the histogram.
    pub fn padding(&self) -> usize {
        libm::ceil(2.0 * self.parzen_sigma) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.5..=MAX_PARZEN_SIGMA).contains(&self.parzen_sigma) {
            return Err(Error::InvalidArgument(alloc::format!("parzen sigma must lie in [0.5, 2], got {}", self.parzen_sigma)));
        }
        if self.bins < 2 * self.padding() + 2 {
            return Err(Error::InvalidArgument(alloc::format!("{} bins leave no room inside the padding", self.bins)));
        }
        Ok(())
    }

    /// Continuous bin coordinate of an intensity in [0,1].
    fn coordinate(&self, v: f64) -> f64 {
        let pad = self.padding() as f64;
        pad + v * (self.bins as f64 - 1.0 - 2.0 * pad)
    }

    fn slope(&self) -> f64 {
        self.bins as f64 - 1.0 - 2.0 * self.padding() as f64
    }
}

fn bspline3(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        2.0 / 3.0 - a * a + 0.5 * a * a * a
    } else if a < 2.0 {
        let t = 2.0 - a;
        t * t * t / 6.0
    } else {
        0.0
    }
}

fn bspline3_deriv(x: f64) -> f64 {
    let a = x.abs();
    let s = if x < 0.0 { -1.0 } else { 1.0 };
    if a < 1.0 {
        -2.0 * x + 1.5 * x * a
    } else if a < 2.0 {
        let t = 2.0 - a;
        -0.5 * s * t * t
    } else {
        0.0
    }
}

const MAX_PARZEN_SIGMA: f64 = 2.0;
const MAX_WINDOW: usize = 9;

/// Normalized window weights (and their derivatives w.r.t. the bin
/// coordinate) over consecutive bins starting at `first`.
struct Window {
    first: usize,
    len: usize,
    w: [f64; MAX_WINDOW],
    dw: [f64; MAX_WINDOW],
}

impl Window {
    fn at(cfg: &NmiConfig, t: f64) -> Window {
        let s = cfg.parzen_sigma;
        let lo = libm::floor(t - 2.0 * s) as isize + 1;
        let first = lo.max(0) as usize;
        let mut win = Window { first, len: 0, w: [0.0; MAX_WINDOW], dw: [0.0; MAX_WINDOW] };
        let (mut sum, mut dsum) = (0.0, 0.0);
        let mut k = [0.0; MAX_WINDOW];
        let mut dk = [0.0; MAX_WINDOW];
        let mut b = first;
        while b < cfg.bins && (b as f64) < t + 2.0 * s && win.len < MAX_WINDOW {
            let x = (t - b as f64) / s;
            k[win.len] = bspline3(x);
            dk[win.len] = bspline3_deriv(x) / s;
            sum += k[win.len];
            dsum += dk[win.len];
            win.len += 1;
            b += 1;
        }
        for i in 0..win.len {
            win.w[i] = k[i] / sum;
            win.dw[i] = (dk[i] - win.w[i] * dsum) / sum;
        }
        win
    }
}

/// Parzen joint histogram of two intensity images on the unit range.
#[derive(Clone, Debug, PartialEq)]
pub struct JointHistogram {
    pub bins: usize,
    /// Row-major `[fixed bin, moving bin]` weights.
    pub weights: Vec<f64>,
    pub fixed: Vec<f64>,
    pub moving: Vec<f64>,
}

impl JointHistogram {
    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Marginal and joint entropies `(H(F), H(M), H(F,M))` in nats.
    pub fn entropies(&self) -> (f64, f64, f64) {
        let n = self.total();
        let h = |w: &[f64]| -> f64 {
            w.iter().filter(|&&x| x > 0.0).map(|&x| {
                let p = x / n;
                -p * libm::log(p)
            }).sum()
        };
        (h(&self.fixed), h(&self.moving), h(&self.weights))
    }
}

fn check_unit(v: &[f64], what: &'static str) -> Result<()> {
    if v.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(Error::InvalidArgument(alloc::format!("{what} intensities must lie in [0,1]")));
    }
    Ok(())
}

fn is_constant(v: &[f64]) -> bool {
    let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    hi - lo < 1e-12
}

/// Joint histogram of `f` and `m` sampled at the same voxels.
pub fn joint_histogram(f: &[f64], m: &[f64], cfg: &NmiConfig) -> Result<JointHistogram> {
    cfg.validate()?;
    if f.len() != m.len() {
        return Err(Error::ShapeMismatch { op: "joint_histogram", detail: alloc::format!("{} vs {} samples", f.len(), m.len()) });
    }
    check_unit(f, "fixed")?;
    check_unit(m, "moving")?;
    let b = cfg.bins;
    let mut hist = JointHistogram { bins: b, weights: vec![0.0; b * b], fixed: vec![0.0; b], moving: vec![0.0; b] };
    for (&x, &y) in f.iter().zip(m) {
        let wf = Window::at(cfg, cfg.coordinate(x));
        let wm = Window::at(cfg, cfg.coordinate(y));
        for i in 0..wf.len {
            hist.fixed[wf.first + i] += wf.w[i];
            let row = (wf.first + i) * b;
            for j in 0..wm.len {
                hist.weights[row + wm.first + j] += wf.w[i] * wm.w[j];
            }
        }
        for j in 0..wm.len {
            hist.moving[wm.first + j] += wm.w[j];
        }
    }
    Ok(hist)
}

/// `(H(F) + H(M o phi)) / H(F, M o phi)`, in [1, 2].
pub fn nmi(f: &Volume, m: &Volume, phi: &DisplacementField, cfg: &NmiConfig) -> Result<f64> {
    Ok(nmi_grad(f, m, phi, cfg)?.0)
}

/// [`nmi`] and its gradient w.r.t. the displacement.
pub fn nmi_grad(f: &Volume, m: &Volume, phi: &DisplacementField, cfg: &NmiConfig) -> Result<(f64, Vec<f64>)> {
    f.dims.ensure_same(m.dims)?;
    f.dims.ensure_same(phi.dims)?;
    let (mut warped, dm) = warp_with_grad(&m.data, m.dims, 1, phi);
    // trilinear weights can overshoot the input range by rounding
    let (lo, hi) = m.min_max();
    warped.iter_mut().for_each(|x| *x = x.clamp(lo, hi));
    if is_constant(&f.data) || is_constant(&warped) {
        return Err(Error::Degenerate("nmi of a constant image"));
    }
    let hist = joint_histogram(&f.data, &warped, cfg)?;
    let (hf, hm, hj) = hist.entropies();
    let value = (hf + hm) / hj;

    // d value / d p_ij for p = weights / n; H(F) does not depend on phi
    let n = hist.total();
    let b = cfg.bins;
    let log_or_zero = |x: f64| if x > 0.0 { libm::log(x / n) } else { 0.0 };
    let dm_bin: Vec<f64> = hist.moving.iter().map(|&x| -(log_or_zero(x) + 1.0)).collect();
    let mut g = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            let w = hist.weights[i * b + j];
            if w > 0.0 {
                let dhj = -(log_or_zero(w) + 1.0);
                g[i * b + j] = (dm_bin[j] * hj - (hf + hm) * dhj) / (hj * hj);
            }
        }
    }
    let slope = cfg.slope();
    let mut grad = vec![0.0; 3 * f.dims.len()];
    for (v, (&x, &y)) in f.data.iter().zip(&warped).enumerate() {
        let wf = Window::at(cfg, cfg.coordinate(x));
        let wm = Window::at(cfg, cfg.coordinate(y));
        let mut dv = 0.0;
        for i in 0..wf.len {
            let row = (wf.first + i) * b + wm.first;
            for j in 0..wm.len {
                dv += g[row + j] * wf.w[i] * wm.dw[j];
            }
        }
        let scale = dv * slope / n;
        for a in 0..3 {
            grad[3 * v + a] = scale * dm[v][a];
        }
    }
    Ok((value, grad))
}
