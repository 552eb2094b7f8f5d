use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Principal axes of one hidden layer's activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaBasis {
    pub layer_index: usize,
    pub mean: Array1<f64>,
    /// `k x width`, orthonormal rows in order of decreasing variance. The
    /// largest-magnitude entry of every row is positive.
    pub components: Array2<f64>,
    /// Variance along each component (`s^2 / (n - 1)`).
    pub explained_variance: Array1<f64>,
    /// Sum of the per-feature variances of the fitted data.
    pub total_variance: f64,
}

impl PcaBasis {
    pub fn k(&self) -> usize {
        self.components.nrows()
    }

    pub fn width(&self) -> usize {
        self.components.ncols()
    }

    fn check_width(&self, cols: usize) -> Result<()> {
        if cols != self.width() {
            return Err(Error::Basis(format!(
                "basis is over {} features, data has {cols}",
                self.width()
            )));
        }
        Ok(())
    }

    /// Coordinates of every row of `activations` (`n x k`).
    pub fn project(&self, activations: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_width(activations.ncols())?;
        let centered = &activations - &self.mean;
        Ok(centered.dot(&self.components.t()))
    }

    /// `mean + coords . components`, i.e. the point on the k-dimensional span.
    pub fn reconstruct(&self, coords: ArrayView2<f64>) -> Result<Array2<f64>> {
        if coords.ncols() != self.k() {
            return Err(Error::Basis(format!(
                "basis has {} components, coordinates have {}",
                self.k(),
                coords.ncols()
            )));
        }
        Ok(coords.dot(&self.components) + &self.mean)
    }

    pub fn explained_ratio(&self) -> Array1<f64> {
        if self.total_variance > 0.0 {
            &self.explained_variance / self.total_variance
        } else {
            Array1::zeros(self.k())
        }
    }
}

/// Top-`k` principal components via the SVD of the mean-centred matrix.
///
/// If the data has rank below `k`, the basis is truncated to the rank and
/// a warning is logged.
pub fn pca_fit(activations: ArrayView2<f64>, k: usize, layer_index: usize) -> Result<PcaBasis> {
    let (n, width) = activations.dim();
    if n < 2 || width == 0 {
        return Err(Error::Shape(format!("cannot fit PCA on a {n}x{width} matrix")));
    }
    if k == 0 {
        return Err(Error::Domain("k must be positive".into()));
    }
    let mean = activations
        .mean_axis(Axis(0))
        .expect("n >= 2 rows");
    let centered = &activations - &mean;
    let total_variance = centered.iter().map(|v| v * v).sum::<f64>() / (n - 1) as f64;

    let m = DMatrix::from_row_iterator(n, width, centered.iter().copied());
    let svd = m.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Domain("SVD did not produce right singular vectors".into()))?;
    let sv = svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));

    let s_max = order.first().map(|&i| sv[i]).unwrap_or(0.0);
    let tol = s_max * (n.max(width) as f64) * f64::EPSILON;
    let rank = order.iter().filter(|&&i| sv[i] > tol).count();
    let k_eff = k.min(rank);
    if k_eff < k {
        log::warn!("requested {k} components but the activations have rank {rank}; using {k_eff}");
    }
    if k_eff == 0 {
        return Err(Error::Domain("activations have zero variance".into()));
    }

    let mut components = Array2::zeros((k_eff, width));
    let mut explained_variance = Array1::zeros(k_eff);
    for (row, &i) in order.iter().take(k_eff).enumerate() {
        let mut comp: Vec<f64> = (0..width).map(|j| v_t[(i, j)]).collect();
        let pivot = comp
            .iter()
            .copied()
            .fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        if pivot < 0.0 {
            comp.iter_mut().for_each(|v| *v = -*v);
        }
        components.row_mut(row).assign(&Array1::from(comp));
        explained_variance[row] = sv[i] * sv[i] / (n - 1) as f64;
    }
    Ok(PcaBasis {
        layer_index,
        mean,
        components,
        explained_variance,
        total_variance,
    })
}
