use ndarray::{Array2, ArrayView2, ArrayViewMut1};
use serde::{Deserialize, Serialize};

use super::pca::PcaBasis;
use crate::error::{Error, Result};
use crate::nn::MlpModel;

/// Plane rotation of two PC coordinates: `(u, v) = (c_i cos a + c_j sin a,
/// -c_i sin a + c_j cos a)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rotation {
    pub pc_i: usize,
    pub pc_j: usize,
    /// Radians.
    pub angle: f64,
}

impl Rotation {
    pub fn apply(&self, coords: &mut ArrayViewMut1<f64>) {
        let (s, c) = self.angle.sin_cos();
        let (a, b) = (coords[self.pc_i], coords[self.pc_j]);
        coords[self.pc_i] = a * c + b * s;
        coords[self.pc_j] = -a * s + b * c;
    }

    pub fn invert(&self, coords: &mut ArrayViewMut1<f64>) {
        let (s, c) = self.angle.sin_cos();
        let (u, v) = (coords[self.pc_i], coords[self.pc_j]);
        coords[self.pc_i] = u * c - v * s;
        coords[self.pc_j] = u * s + v * c;
    }

    /// Rotated coordinates of every row of `coords`.
    pub fn rotate_all(&self, coords: ArrayView2<f64>) -> Array2<f64> {
        let mut out = coords.to_owned();
        for mut row in out.rows_mut() {
            self.apply(&mut row);
        }
        out
    }
}

/// An intervention on the PC coordinates of one hidden layer. Fixed
/// coordinates refer to the rotated frame when a rotation is given.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSpec {
    pub layer_index: usize,
    #[serde(default)]
    pub fixed_coords: Vec<(usize, f64)>,
    #[serde(default)]
    pub rotation: Option<Rotation>,
}

impl PatchSpec {
    pub fn identity(layer_index: usize) -> Self {
        Self {
            layer_index,
            ..Self::default()
        }
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        let mut seen = vec![false; k];
        for &(pc, v) in &self.fixed_coords {
            if pc >= k {
                return Err(Error::Basis(format!("PC {pc} out of range for k = {k}")));
            }
            if std::mem::replace(&mut seen[pc], true) {
                return Err(Error::Basis(format!("PC {pc} fixed twice")));
            }
            if !v.is_finite() {
                return Err(Error::Domain(format!("PC {pc} fixed to {v}")));
            }
        }
        if let Some(r) = self.rotation {
            if r.pc_i >= k || r.pc_j >= k || r.pc_i == r.pc_j {
                return Err(Error::Basis(format!(
                    "rotation plane ({}, {}) invalid for k = {k}",
                    r.pc_i, r.pc_j
                )));
            }
        }
        Ok(())
    }
}

fn check_basis(model: &MlpModel, basis: &PcaBasis, layer: usize) -> Result<()> {
    model.check_layer(layer)?;
    if basis.layer_index != layer {
        return Err(Error::Basis(format!(
            "basis was fitted on layer {}, patch targets layer {layer}",
            basis.layer_index
        )));
    }
    let width = model.spec.layer_widths[layer];
    if basis.width() != width {
        return Err(Error::Basis(format!(
            "basis width {} does not match layer {layer} width {width}",
            basis.width()
        )));
    }
    Ok(())
}

/// Activations of `layer` after editing their PC coordinates.
///
/// `edit` receives the trace index and the coordinates (rotated when
/// `rotation` is set). Only the change in coordinates is written back, so the
/// residual outside the PCA span is untouched and an edit that changes
/// nothing reproduces the original activations exactly.
pub fn patched_activations_with<F>(
    model: &MlpModel,
    traces: ArrayView2<f64>,
    basis: &PcaBasis,
    layer: usize,
    rotation: Option<Rotation>,
    mut edit: F,
) -> Result<Array2<f64>>
where
    F: FnMut(usize, &mut ArrayViewMut1<f64>),
{
    check_basis(model, basis, layer)?;
    let mut acts = model.hidden_activations(traces, layer)?;
    let old = basis.project(acts.view())?;
    let mut new = old.clone();
    for (i, mut row) in new.rows_mut().into_iter().enumerate() {
        if let Some(r) = rotation {
            r.apply(&mut row);
        }
        edit(i, &mut row);
        if let Some(r) = rotation {
            r.invert(&mut row);
        }
    }
    let delta = &new - &old;
    if delta.iter().any(|&d| d != 0.0) {
        acts += &delta.dot(&basis.components);
    }
    Ok(acts)
}

pub fn patched_activations(
    model: &MlpModel,
    traces: ArrayView2<f64>,
    basis: &PcaBasis,
    patch: &PatchSpec,
) -> Result<Array2<f64>> {
    patch.validate(basis.k())?;
    patched_activations_with(model, traces, basis, patch.layer_index, patch.rotation, |_, c| {
        for &(pc, v) in &patch.fixed_coords {
            c[pc] = v;
        }
    })
}

/// Logits of `model` with `patch` applied at its layer.
pub fn patched_forward(
    model: &MlpModel,
    traces: ArrayView2<f64>,
    basis: &PcaBasis,
    patch: &PatchSpec,
) -> Result<Array2<f64>> {
    let acts = patched_activations(model, traces, basis, patch)?;
    model.forward_from(patch.layer_index, acts.view())
}
