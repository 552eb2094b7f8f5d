//! Unsupervised HW mask recovery on a two-share grid.
//!
//! Two PCs of a hidden layer are assumed to span the HW grid of the two
//! shares. After an optional rotation of that plane, one axis is pinned at a
//! corner value so its share looks constant to the rest of the network, and
//! the logits then rank traces by the HW of the share on the other axis.
//! By default the patched activation is rebuilt from the plane alone: the
//! other components sit at their mean and the residual outside the basis is
//! dropped, since both still carry share information that masks the pin.
//! Nothing here reads ground truth: orientation and share identity come from
//! the raw traces alone.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use super::patch::{patched_activations_with, PatchSpec, Rotation};
use super::pca::PcaBasis;
use super::shares::{orient_hw_estimate, recover_share_hw, validate_shares, Pin, ShareEstimate, ShareValidation};
use crate::error::{Error, Result};
use crate::nn::MlpModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HwRecoveryConfig {
    /// The PC plane holding the share grid.
    #[serde(default = "default_plane")]
    pub plane: (usize, usize),
    /// Fixed rotation angle in radians; `None` selects it by sweep.
    #[serde(default)]
    pub angle: Option<f64>,
    /// Angles tried in `[0, pi/2)` when sweeping.
    #[serde(default = "default_sweep_steps")]
    pub sweep_steps: usize,
    /// Corners sit at `+-corner_scale` standard deviations of the pinned axis.
    #[serde(default = "default_corner_scale")]
    pub corner_scale: f64,
    /// Rebuild patched activations from the plane only; `false` keeps the
    /// other components and the residual.
    #[serde(default = "default_plane_only")]
    pub plane_only: bool,
}

fn default_plane() -> (usize, usize) {
    (0, 1)
}

fn default_sweep_steps() -> usize {
    18
}

fn default_corner_scale() -> f64 {
    2.0
}

fn default_plane_only() -> bool {
    true
}

impl Default for HwRecoveryConfig {
    fn default() -> Self {
        Self {
            plane: default_plane(),
            angle: None,
            sweep_steps: default_sweep_steps(),
            corner_scale: default_corner_scale(),
            plane_only: default_plane_only(),
        }
    }
}

impl HwRecoveryConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        let (i, j) = self.plane;
        if i == j || i >= k || j >= k {
            return Err(Error::Basis(format!("plane ({i}, {j}) invalid for k = {k}")));
        }
        if self.angle.is_none() && self.sweep_steps == 0 {
            return Err(Error::Config("sweep_steps must be positive".into()));
        }
        if !(self.corner_scale.is_finite() && self.corner_scale > 0.0) {
            return Err(Error::Config(format!("corner_scale {} must be positive", self.corner_scale)));
        }
        Ok(())
    }
}

/// One oriented share estimate with the patch that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveredShare {
    pub estimate: ShareEstimate,
    pub validation: ShareValidation,
    /// Rotated axis (0 = first plane axis) that stayed free.
    pub free_axis: usize,
    /// Whether the estimate was reversed to make leakage grow with HW.
    pub flipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HwRecovery {
    pub angle: f64,
    pub shares: [RecoveredShare; 2],
    /// Index into `shares` of the share identified as the mask: the one
    /// whose SNR peaks earliest in the trace.
    pub mask: usize,
    /// `(angle, summed SNR peak)` for every angle tried.
    pub sweep: Vec<(f64, f64)>,
}

impl HwRecovery {
    pub fn mask_share(&self) -> &RecoveredShare {
        &self.shares[self.mask]
    }

    pub fn masked_share(&self) -> &RecoveredShare {
        &self.shares[1 - self.mask]
    }
}

fn axis_std(model: &MlpModel, traces: ArrayView2<f64>, basis: &PcaBasis, rot: Rotation, axis: usize) -> Result<f64> {
    let acts = model.hidden_activations(traces, basis.layer_index)?;
    let coords = rot.rotate_all(basis.project(acts.view())?.view());
    let col = coords.column(axis);
    let mean = col.sum() / col.len() as f64;
    Ok((col.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / col.len() as f64).sqrt())
}

/// Estimate of the share on the free axis, with the other axis pinned at
/// `value`.
fn estimate_free_axis(
    model: &MlpModel,
    traces: ArrayView2<f64>,
    basis: &PcaBasis,
    rot: Rotation,
    pinned_pc: usize,
    value: f64,
    plane_only: bool,
) -> Result<ShareEstimate> {
    let layer = basis.layer_index;
    let acts = if plane_only {
        let mut coords = rot.rotate_all(basis.project(model.hidden_activations(traces, layer)?.view())?.view());
        for mut row in coords.rows_mut() {
            for (pc, c) in row.iter_mut().enumerate() {
                if pc == pinned_pc {
                    *c = value;
                } else if pc != rot.pc_i && pc != rot.pc_j {
                    *c = 0.0;
                }
            }
            rot.invert(&mut row);
        }
        basis.reconstruct(coords.view())?
    } else {
        patched_activations_with(model, traces, basis, layer, Some(rot), |_, c| c[pinned_pc] = value)?
    };
    let logits = model.forward_from(layer, acts.view())?;
    // the dropped residual has no PatchSpec form; off-plane pins are listed
    let mut fixed_coords = vec![(pinned_pc, value)];
    if plane_only {
        fixed_coords.extend((0..basis.k()).filter(|&pc| pc != rot.pc_i && pc != rot.pc_j).map(|pc| (pc, 0.0)));
    }
    let source = PatchSpec {
        layer_index: layer,
        fixed_coords,
        rotation: Some(rot),
    };
    recover_share_hw(logits.view(), Pin::Low, source)
}

/// Best oriented estimate for one free axis over both corners of the pinned
/// axis, judged by SNR peak on the raw traces.
fn recover_axis(
    model: &MlpModel,
    traces: ArrayView2<f64>,
    basis: &PcaBasis,
    rot: Rotation,
    free_axis: usize,
    cfg: &HwRecoveryConfig,
) -> Result<RecoveredShare> {
    let pinned_pc = if free_axis == 0 { rot.pc_j } else { rot.pc_i };
    let sd = axis_std(model, traces, basis, rot, pinned_pc)?;
    let mut best: Option<RecoveredShare> = None;
    for sign in [-1.0, 1.0] {
        let est = estimate_free_axis(model, traces, basis, rot, pinned_pc, sign * cfg.corner_scale * sd, cfg.plane_only)?;
        let (estimate, flipped) = orient_hw_estimate(est, traces)?;
        let validation = validate_shares(&estimate.values, traces)?;
        if best.as_ref().is_none_or(|b| validation.peak > b.validation.peak) {
            best = Some(RecoveredShare {
                estimate,
                validation,
                free_axis,
                flipped,
            });
        }
    }
    Ok(best.expect("two corners tried"))
}

fn recover_at(
    model: &MlpModel,
    traces: ArrayView2<f64>,
    basis: &PcaBasis,
    cfg: &HwRecoveryConfig,
    angle: f64,
) -> Result<[RecoveredShare; 2]> {
    let rot = Rotation {
        pc_i: cfg.plane.0,
        pc_j: cfg.plane.1,
        angle,
    };
    Ok([
        recover_axis(model, traces, basis, rot, 0, cfg)?,
        recover_axis(model, traces, basis, rot, 1, cfg)?,
    ])
}

/// Summed SNR peak of both recovered shares for each angle
/// `i * (pi/2) / steps`.
pub fn rotation_sweep(
    model: &MlpModel,
    traces: ArrayView2<f64>,
    basis: &PcaBasis,
    cfg: &HwRecoveryConfig,
) -> Result<Vec<(f64, f64)>> {
    cfg.validate(basis.k())?;
    let steps = cfg.sweep_steps.max(1);
    (0..steps)
        .map(|i| {
            let angle = i as f64 * std::f64::consts::FRAC_PI_2 / steps as f64;
            let [a, b] = recover_at(model, traces, basis, cfg, angle)?;
            Ok((angle, a.validation.peak + b.validation.peak))
        })
        .collect()
}

/// Recovers both share HWs from a HW model. The angle is `cfg.angle` or,
/// when unset, the sweep angle with the largest summed SNR peak (first one
/// on ties).
pub fn recover_masks_hw(
    model: &MlpModel,
    traces: ArrayView2<f64>,
    basis: &PcaBasis,
    cfg: &HwRecoveryConfig,
) -> Result<HwRecovery> {
    cfg.validate(basis.k())?;
    if model.spec.n_classes != 9 {
        return Err(Error::Shape(format!(
            "HW recovery needs a 9-class model, got {} classes",
            model.spec.n_classes
        )));
    }
    let sweep = match cfg.angle {
        Some(_) => vec![],
        None => rotation_sweep(model, traces, basis, cfg)?,
    };
    let angle = match cfg.angle {
        Some(a) => a,
        None => sweep
            .iter()
            .fold((0.0, f64::NEG_INFINITY), |best, &(a, s)| if s > best.1 { (a, s) } else { best })
            .0,
    };
    let shares = recover_at(model, traces, basis, cfg, angle)?;
    let mask = usize::from(shares[1].validation.argmax < shares[0].validation.argmax);
    Ok(HwRecovery {
        angle,
        shares,
        mask,
        sweep,
    })
}
