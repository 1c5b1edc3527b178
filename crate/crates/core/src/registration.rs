//! Multiresolution instance optimization of a dense displacement field
//! against a DSIR cosine, MIND-SSD or NMI objective with a diffusion
//! regularizer.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::autodiff::OptimizerState;
use crate::baseline::{mind, mind_ssd_grad, nmi_grad, NmiConfig};
use crate::error::{Error, Result};
use crate::masrnet::MasrNet;
use crate::metrics::COSINE_NORM_FLOOR;
use crate::volume::{resample_trilinear, spatial_gradient, Dims, DisplacementField, FeatureField, Stencil, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "lowercase"))]
pub enum Metric {
    Dns,
    Mind,
    Nmi,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Dns => "dns",
            Metric::Mind => "mind",
            Metric::Nmi => "nmi",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dns" => Ok(Metric::Dns),
            "mind" => Ok(Metric::Mind),
            "nmi" => Ok(Metric::Nmi),
            other => Err(Error::InvalidArgument(alloc::format!("unknown metric {other:?} (dns, mind, nmi)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct RegistrationConfig {
    pub metric: Metric,
    /// Grid scale of each level relative to the input, coarsest first.
    pub scales: Vec<f64>,
    pub learning_rates: Vec<f64>,
    pub iterations: Vec<usize>,
    pub lambdas: Vec<f64>,
    /// Gaussian smoothing of both DSIRs at every level, in voxels.
    pub sigma: f64,
    pub nmi: NmiConfig,
    /// Trained network checkpoint, required for the dns metric.
    pub checkpoint: Option<String>,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            metric: Metric::Dns,
            scales: vec![0.5, 0.75, 1.0],
            learning_rates: vec![1e-2, 5e-3, 3e-3],
            iterations: vec![100, 80, 50],
            lambdas: vec![0.6, 0.5, 0.4],
            sigma: 1.0,
            nmi: NmiConfig::default(),
            checkpoint: None,
        }
    }
}

impl RegistrationConfig {
    pub fn levels(&self) -> usize {
        self.scales.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.scales.len();
        if n == 0 {
            return Err(Error::InvalidArgument("registration needs at least one level".into()));
        }
        if self.learning_rates.len() != n || self.iterations.len() != n || self.lambdas.len() != n {
            return Err(Error::InvalidArgument(alloc::format!(
                "per-level lists disagree: {} scales, {} learning rates, {} iteration counts, {} lambdas",
                n,
                self.learning_rates.len(),
                self.iterations.len(),
                self.lambdas.len()
            )));
        }
        if let Some(s) = self.scales.iter().find(|s| !(**s > 0.0 && **s <= 1.0)) {
            return Err(Error::InvalidArgument(alloc::format!("scale {s} outside (0, 1]")));
        }
        if let Some(r) = self.learning_rates.iter().find(|r| !(**r > 0.0) || !r.is_finite()) {
            return Err(Error::InvalidArgument(alloc::format!("learning rate {r} must be > 0")));
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(**l >= 0.0) || !l.is_finite()) {
            return Err(Error::InvalidArgument(alloc::format!("lambda {l} must be >= 0")));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::InvalidArgument(alloc::format!("sigma {} must be >= 0", self.sigma)));
        }
        if self.metric == Metric::Nmi {
            self.nmi.validate()?;
        }
        Ok(())
    }

    pub fn level(&self, l: usize) -> LevelConfig {
        LevelConfig { learning_rate: self.learning_rates[l], iterations: self.iterations[l], lambda: self.lambdas[l] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub lambda: f64,
}

/// Loss terms of one evaluated iterate.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct IterationRecord {
    pub level: usize,
    pub iteration: usize,
    pub similarity: f64,
    pub regularity: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationResult {
    /// Displacement at the fixed image's resolution.
    pub field: DisplacementField,
    pub trace: Vec<IterationRecord>,
    /// Wall-clock seconds; `None` without a clock.
    pub wall_seconds: Option<f64>,
}

/// Trilinear downsampling of a DSIR to each scale.
pub fn dsir_pyramid(d: &FeatureField, scales: &[f64]) -> Result<Vec<FeatureField>> {
    scales
        .iter()
        .map(|&s| {
            let dims = d.dims.scaled(s);
            if dims == d.dims {
                Ok(d.clone())
            } else {
                d.resampled(dims)
            }
        })
        .collect()
}

fn ensure_aligned(f: &FeatureField, m: &FeatureField, phi: &DisplacementField) -> Result<()> {
    f.dims.ensure_same(m.dims)?;
    f.dims.ensure_same(phi.dims)?;
    if f.channels != m.channels {
        return Err(Error::ShapeMismatch {
            op: "similarity_dns",
            detail: alloc::format!("{} vs {} channels", f.channels, m.channels),
        });
    }
    Ok(())
}

/// Negated mean cosine between `d_f(x)` and `d_m(x + phi(x))`, with its
/// gradient w.r.t. the displacement. No smoothing is applied.
pub fn cosine_loss_grad(d_f: &FeatureField, d_m: &FeatureField, phi: &DisplacementField) -> Result<(f64, Vec<f64>)> {
    ensure_aligned(d_f, d_m, phi)?;
    let (dims, ch) = (d_f.dims, d_f.channels);
    let n = dims.len() as f64;
    let mut b = vec![0.0; ch];
    let mut db = vec![[0.0; 3]; ch];
    let mut grad = vec![0.0; 3 * dims.len()];
    let mut sum = 0.0;
    for v in 0..dims.len() {
        let c = dims.coords(v);
        let u = phi.at(v);
        let p = [c[0] as f64 + u[0], c[1] as f64 + u[1], c[2] as f64 + u[2]];
        Stencil::at(dims, p).sample_channels(&d_m.data, ch, &mut b, Some(&mut db));
        let a = d_f.vector(v);
        let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
        for k in 0..ch {
            ab += a[k] * b[k];
            aa += a[k] * a[k];
            bb += b[k] * b[k];
        }
        let na = libm::sqrt(aa).max(COSINE_NORM_FLOOR);
        let nb_raw = libm::sqrt(bb);
        let nb = nb_raw.max(COSINE_NORM_FLOOR);
        let cos = ab / (na * nb);
        sum += cos;
        // d cos / d b = a / (|a||b|) - cos b / |b|^2, the second term only
        // while the norm is above the floor
        let wa = 1.0 / (na * nb);
        let wb = if nb_raw > COSINE_NORM_FLOOR { cos / (nb * nb) } else { 0.0 };
        let mut g = [0.0; 3];
        for k in 0..ch {
            let dk = wa * a[k] - wb * b[k];
            g[0] += dk * db[k][0];
            g[1] += dk * db[k][1];
            g[2] += dk * db[k][2];
        }
        for ax in 0..3 {
            grad[3 * v + ax] = -g[ax] / n;
        }
    }
    Ok((-sum / n, grad))
}

fn smoothed_pair(d_f: &FeatureField, d_m: &FeatureField, sigma: f64) -> Result<(FeatureField, FeatureField)> {
    if sigma > 0.0 {
        Ok((d_f.smoothed(sigma)?, d_m.smoothed(sigma)?))
    } else {
        Ok((d_f.clone(), d_m.clone()))
    }
}

/// `-mean_x cos(psi(d_f)(x), psi(d_m)(x + phi(x)))` where `psi` is Gaussian
/// smoothing with `sigma` voxels. Lies in `[-1, 1]`.
pub fn similarity_dns(d_f: &FeatureField, d_m: &FeatureField, phi: &DisplacementField, sigma: f64) -> Result<f64> {
    Ok(similarity_dns_grad(d_f, d_m, phi, sigma)?.0)
}

/// [`similarity_dns`] and its gradient w.r.t. the displacement.
pub fn similarity_dns_grad(d_f: &FeatureField, d_m: &FeatureField, phi: &DisplacementField, sigma: f64) -> Result<(f64, Vec<f64>)> {
    ensure_aligned(d_f, d_m, phi)?;
    let (f, m) = smoothed_pair(d_f, d_m, sigma)?;
    cosine_loss_grad(&f, &m, phi)
}

/// Mean over voxels of the squared Frobenius norm of the field's Jacobian.
pub fn regularity(phi: &DisplacementField) -> Result<f64> {
    let jac = spatial_gradient(phi)?;
    let sum: f64 = jac.iter().map(|j| j.iter().flatten().map(|x| x * x).sum::<f64>()).sum();
    Ok(sum / phi.dims.len() as f64)
}

/// [`regularity`] and its gradient, the adjoint of the difference stencil
/// used by [`spatial_gradient`].
pub fn regularity_grad(phi: &DisplacementField) -> Result<(f64, Vec<f64>)> {
    let jac = spatial_gradient(phi)?;
    let dims = phi.dims;
    let n = dims.len() as f64;
    let strides = [dims.0[1] * dims.0[2], dims.0[2], 1];
    let mut grad = vec![0.0; 3 * dims.len()];
    let mut sum = 0.0;
    for (v, j) in jac.iter().enumerate() {
        let c = dims.coords(v);
        for a in 0..3 {
            let (lo, hi, h) = if c[a] == 0 {
                (v, v + strides[a], 1.0)
            } else if c[a] == dims.0[a] - 1 {
                (v - strides[a], v, 1.0)
            } else {
                (v - strides[a], v + strides[a], 2.0)
            };
            for comp in 0..3 {
                let d = j[comp][a];
                sum += d * d;
                let w = 2.0 * d / (h * n);
                grad[3 * hi + comp] += w;
                grad[3 * lo + comp] -= w;
            }
        }
    }
    Ok((sum / n, grad))
}

/// Level inputs on a common grid. The DSIR variant expects features that
/// are already smoothed.
pub enum LevelInputs<'a> {
    Dns { fixed: &'a FeatureField, moving: &'a FeatureField },
    Mind { fixed: &'a FeatureField, moving: &'a FeatureField },
    Nmi { fixed: &'a Volume, moving: &'a Volume, config: NmiConfig },
}

impl LevelInputs<'_> {
    fn dims(&self) -> Result<Dims> {
        match self {
            LevelInputs::Dns { fixed, moving } | LevelInputs::Mind { fixed, moving } => {
                fixed.dims.ensure_same(moving.dims)?;
                Ok(fixed.dims)
            }
            LevelInputs::Nmi { fixed, moving, .. } => {
                fixed.dims.ensure_same(moving.dims)?;
                Ok(fixed.dims)
            }
        }
    }

    /// Similarity loss (lower is better) and its gradient. For NMI this is
    /// the negated NMI.
    pub fn loss_grad(&self, phi: &DisplacementField) -> Result<(f64, Vec<f64>)> {
        match self {
            LevelInputs::Dns { fixed, moving } => cosine_loss_grad(fixed, moving, phi),
            LevelInputs::Mind { fixed, moving } => mind_ssd_grad(fixed, moving, phi),
            LevelInputs::Nmi { fixed, moving, config } => {
                let (v, mut g) = nmi_grad(fixed, moving, phi, config)?;
                g.iter_mut().for_each(|x| *x = -*x);
                Ok((-v, g))
            }
        }
    }
}

/// Per-axis factor from voxel displacements to the normalized `[-1, 1]`
/// grid coordinates the optimizer works in.
fn normalization(dims: Dims) -> [f64; 3] {
    dims.0.map(|n| if n > 1 { 2.0 / (n - 1) as f64 } else { 1.0 })
}

/// Adam on the displacement of one level, minimizing
/// `similarity + lambda * regularity`. Returns the evaluated iterate with the
/// lowest total loss and one trace record per evaluation.
pub fn optimize_level(
    inputs: &LevelInputs<'_>,
    init: &DisplacementField,
    cfg: &LevelConfig,
    level: usize,
) -> Result<(DisplacementField, Vec<IterationRecord>)> {
    let dims = inputs.dims()?;
    dims.ensure_same(init.dims)?;
    if !(cfg.learning_rate > 0.0) || !(cfg.lambda >= 0.0) {
        return Err(Error::InvalidArgument(alloc::format!("bad level config {cfg:?}")));
    }
    let mut trace = Vec::with_capacity(cfg.iterations);
    if cfg.iterations == 0 {
        return Ok((init.clone(), trace));
    }
    let scale = normalization(dims);
    let mut theta: Vec<f64> = init.data.iter().enumerate().map(|(i, &u)| u * scale[i % 3]).collect();
    let mut phi = init.clone();
    let mut best = (f64::INFINITY, init.clone());
    let mut opt = OptimizerState::new(cfg.learning_rate);
    for it in 0..cfg.iterations {
        for (i, (u, t)) in phi.data.iter_mut().zip(&theta).enumerate() {
            *u = t / scale[i % 3];
        }
        let (sim, mut grad) = inputs.loss_grad(&phi)?;
        let (reg, reg_grad) = regularity_grad(&phi)?;
        let total = sim + cfg.lambda * reg;
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss { level, iteration: it });
        }
        trace.push(IterationRecord { level, iteration: it, similarity: sim, regularity: reg, total });
        if total < best.0 {
            best = (total, phi.clone());
        }
        if it + 1 == cfg.iterations {
            break;
        }
        for (i, (g, r)) in grad.iter_mut().zip(&reg_grad).enumerate() {
            *g = (*g + cfg.lambda * r) / scale[i % 3];
        }
        opt.step(&mut [&mut theta], &[&grad])?;
    }
    Ok((best.1, trace))
}

enum Prepared {
    Dns(Vec<FeatureField>, Vec<FeatureField>),
    Volumes(Vec<Volume>, Vec<Volume>),
}

fn volume_pyramid(v: &Volume, scales: &[f64]) -> Result<Vec<Volume>> {
    scales
        .iter()
        .map(|&s| {
            let dims = v.dims.scaled(s);
            if dims == v.dims {
                Ok(v.clone())
            } else {
                resample_trilinear(v, dims)
            }
        })
        .collect()
}

/// Coarse-to-fine registration of `moving` onto `fixed`. The returned field
/// maps fixed-grid points into the moving image: `moving(x + phi(x))`
/// resembles `fixed(x)`. The dns metric needs `net`.
pub fn register(fixed: &Volume, moving: &Volume, cfg: &RegistrationConfig, net: Option<&MasrNet>) -> Result<RegistrationResult> {
    #[cfg(feature = "std")]
    let start = std::time::Instant::now();
    cfg.validate()?;
    fixed.dims.ensure_same(moving.dims)?;
    let dims = fixed.dims;
    let prepared = match cfg.metric {
        Metric::Dns => {
            let net = net.ok_or(Error::MissingNetwork)?;
            let d_f = net.forward(fixed)?;
            let d_m = net.forward(moving)?;
            let mut pf = dsir_pyramid(&d_f, &cfg.scales)?;
            let mut pm = dsir_pyramid(&d_m, &cfg.scales)?;
            if cfg.sigma > 0.0 {
                for d in pf.iter_mut().chain(pm.iter_mut()) {
                    *d = d.smoothed(cfg.sigma)?;
                }
            }
            Prepared::Dns(pf, pm)
        }
        Metric::Mind | Metric::Nmi => Prepared::Volumes(volume_pyramid(fixed, &cfg.scales)?, volume_pyramid(moving, &cfg.scales)?),
    };
    let mut trace = Vec::new();
    let mut phi: Option<DisplacementField> = None;
    for l in 0..cfg.levels() {
        let level_dims = dims.scaled(cfg.scales[l]);
        let init = match phi.take() {
            None => DisplacementField::zeros(level_dims),
            Some(p) if p.dims == level_dims => p,
            Some(p) => p.resampled(level_dims)?,
        };
        let level_cfg = cfg.level(l);
        let (out, records) = match (&prepared, cfg.metric) {
            (Prepared::Dns(pf, pm), _) => {
                optimize_level(&LevelInputs::Dns { fixed: &pf[l], moving: &pm[l] }, &init, &level_cfg, l)?
            }
            (Prepared::Volumes(vf, vm), Metric::Mind) => {
                let (f, m) = (mind(&vf[l]), mind(&vm[l]));
                optimize_level(&LevelInputs::Mind { fixed: &f, moving: &m }, &init, &level_cfg, l)?
            }
            (Prepared::Volumes(vf, vm), _) => optimize_level(
                &LevelInputs::Nmi { fixed: &vf[l], moving: &vm[l], config: cfg.nmi },
                &init,
                &level_cfg,
                l,
            )?,
        };
        trace.extend(records);
        phi = Some(out);
    }
    let mut field = phi.unwrap_or_else(|| DisplacementField::zeros(dims));
    if field.dims != dims {
        field = field.resampled(dims)?;
    }
    #[cfg(feature = "std")]
    let wall_seconds = Some(start.elapsed().as_secs_f64());
    #[cfg(not(feature = "std"))]
    let wall_seconds = None;
    Ok(RegistrationResult { field, trace, wall_seconds })
}

#[cfg(test)]
mod tests;
