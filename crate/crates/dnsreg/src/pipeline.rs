//! Workflows shared by the command line and the acceptance run.

use dnsreg_core::baseline::{mind, mind_ssd, nmi};
use dnsreg_core::contrastive::FOREGROUND_THRESHOLD;
use dnsreg_core::masrnet::MasrNet;
use dnsreg_core::metrics::{dice, hd95, jacobian_folding, loss_landscape, LabelVolume, LandscapeRow};
use dnsreg_core::phantom::{self, Phantom};
use dnsreg_core::registration::{similarity_dns, Metric, RegistrationConfig};
use dnsreg_core::volume::{invert_field, warp};
use dnsreg_core::{BinaryMask, Dims, DisplacementField, Volume};

use crate::error::{Error, Result};

/// Fixed-point iterations used to invert ground-truth deformations.
pub const INVERSE_ITERATIONS: usize = 30;
/// Default smoothing of synthetic deformations, in voxels.
pub const DEFAULT_SMOOTHNESS: f64 = 12.0;

/// A synthetic registration problem with known answer.
#[derive(Clone, Debug)]
pub struct Case {
    pub phantom: Phantom,
    pub fixed: Volume,
    /// Second modality of the phantom, warped by `deformation`.
    pub moving: Volume,
    pub moving_labels: LabelVolume,
    /// Applied to the second modality: `moving(x) = second(x + deformation(x))`.
    pub deformation: DisplacementField,
    /// The field registration should find: `moving(x + truth(x)) ~ fixed(x)`.
    pub truth: DisplacementField,
}

impl Case {
    /// Seeds for the modality map and the deformation derive from `seed`.
    pub fn generate(seed: u64, dims: Dims, amplitude: f64, smoothness: f64) -> Result<Case> {
        let ph = phantom::generate(seed, dims)?;
        let (fixed, second) = phantom::make_modality_pair(&ph, seed ^ 0x6d6f_6461)?;
        Case::build(ph, fixed, second, seed, amplitude, smoothness)
    }

    /// As [`Case::generate`], with the contrast-inverted fixed image
    /// `1 - fixed` as the second modality.
    pub fn inverted(seed: u64, dims: Dims, amplitude: f64, smoothness: f64) -> Result<Case> {
        let ph = phantom::generate(seed, dims)?;
        let fixed = ph.volume.clone();
        let second = Volume { data: fixed.data.iter().map(|x| 1.0 - x).collect(), ..fixed.clone() };
        Case::build(ph, fixed, second, seed, amplitude, smoothness)
    }

    fn build(ph: Phantom, fixed: Volume, second: Volume, seed: u64, amplitude: f64, smoothness: f64) -> Result<Case> {
        let dims = fixed.dims;
        let deformation = phantom::synth_deformation(seed ^ 0x6465_666f, dims, amplitude, smoothness)?;
        let moving = warp(&second, &deformation)?;
        let moving_labels = ph.labels.warped(&deformation)?;
        let truth = invert_field(&deformation, INVERSE_ITERATIONS);
        Ok(Case { phantom: ph, fixed, moving, moving_labels, deformation, truth })
    }

    /// Voxels of the fixed image above the foreground threshold.
    pub fn foreground(&self) -> BinaryMask {
        BinaryMask::foreground(&self.fixed, FOREGROUND_THRESHOLD)
    }
}

/// One row per label (background excluded) plus field statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub metric: &'static str,
    pub label: String,
    pub value: f64,
}

/// Dice and HD95 of every non-background label of `fixed` against `moving`
/// warped by `field`, the folding percentage of `field`, and the mean
/// endpoint error against `truth` (over `mask`, or every voxel) when given.
pub fn evaluate(
    fixed: &LabelVolume,
    moving: &LabelVolume,
    field: Option<&DisplacementField>,
    truth: Option<&DisplacementField>,
    mask: Option<&BinaryMask>,
    spacing: [f64; 3],
) -> Result<Vec<EvalRow>> {
    let warped = match field {
        Some(phi) => moving.warped(phi)?,
        None => moving.clone(),
    };
    fixed.dims.ensure_same(warped.dims).map_err(Error::from)?;
    let mut rows = Vec::new();
    for (label, name) in fixed.legend.iter().filter(|(l, _)| *l != 0) {
        let (a, b) = (fixed.mask(*label), warped.mask(*label));
        rows.push(EvalRow { metric: "dice", label: name.clone(), value: dice(&a, &b)? });
        let h = if a.count() > 0 && b.count() > 0 { hd95(&a, &b, spacing)? } else { f64::NAN };
        rows.push(EvalRow { metric: "hd95", label: name.clone(), value: h });
    }
    let zero;
    let phi = match field {
        Some(p) => p,
        None => {
            zero = DisplacementField::zeros(fixed.dims);
            &zero
        }
    };
    rows.push(EvalRow { metric: "folding_percent", label: String::new(), value: jacobian_folding(phi)?.folding_percent });
    if let Some(t) = truth {
        rows.push(EvalRow { metric: "endpoint_error", label: String::new(), value: phi.mean_endpoint_error(t, mask)? });
    }
    Ok(rows)
}

/// Rotation landscape of `moving` against `fixed` under `metric`: DSIR
/// similarity (lower is better), MIND-SSD (lower is better) or NMI (higher
/// is better).
pub fn landscape(
    fixed: &Volume,
    moving: &Volume,
    metric: Metric,
    net: Option<&MasrNet>,
    cfg: &RegistrationConfig,
    angles: &[f64],
) -> Result<Vec<LandscapeRow>> {
    fixed.dims.ensure_same(moving.dims).map_err(Error::from)?;
    let zero = DisplacementField::zeros(fixed.dims);
    let rows = match metric {
        Metric::Dns => {
            let net = net.ok_or(dnsreg_core::Error::MissingNetwork)?;
            let d_f = net.forward(fixed)?;
            loss_landscape(moving, angles, |m| similarity_dns(&d_f, &net.forward(m)?, &zero, cfg.sigma))?
        }
        Metric::Mind => {
            let m_f = mind(fixed);
            loss_landscape(moving, angles, |m| mind_ssd(&m_f, &mind(m), &zero))?
        }
        Metric::Nmi => loss_landscape(moving, angles, |m| nmi(fixed, m, &zero, &cfg.nmi))?,
    };
    Ok(rows)
}

/// Whether lower costs are better for `metric` in [`landscape`].
pub fn lower_is_better(metric: Metric) -> bool {
    metric != Metric::Nmi
}
