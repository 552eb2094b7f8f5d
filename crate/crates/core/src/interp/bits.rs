use ndarray::{Array2, ArrayView2};

use super::kmeans::select_k;
use super::patch::{patched_activations_with, PatchSpec};
use super::pca::PcaBasis;
use super::shares::{EstimateKind, ShareEstimate};
use crate::error::{Error, Result};
use crate::nn::MlpModel;

/// Candidate cluster counts for a 2-bit share.
pub const BITS2_K: [usize; 3] = [2, 3, 4];

#[derive(Debug, Clone, PartialEq)]
pub struct BitsRecovery {
    pub estimate: ShareEstimate,
    /// Patched coordinates that were clustered, `n x 2`.
    pub coords: Array2<f64>,
    /// `(k, mean silhouette)` per candidate.
    pub silhouettes: Vec<(usize, f64)>,
}

/// 2-bit share classes from the PC grid of `basis.layer_index`.
///
/// The `input_coords` are set to zero, the activations are re-projected and
/// the two `output_coords` of every trace are clustered with seeded k-means,
/// `k` chosen by silhouette. Cluster ids are raw: no mapping to share values
/// is attempted. The per-trace score is the distance to the assigned
/// centroid.
pub fn recover_share_bits(
    model: &MlpModel,
    traces: ArrayView2<f64>,
    basis: &PcaBasis,
    input_coords: &[usize],
    output_coords: (usize, usize),
    seed: u64,
) -> Result<BitsRecovery> {
    let k = basis.k();
    let (a, b) = output_coords;
    if a == b || a >= k || b >= k || input_coords.iter().any(|&c| c >= k || c == a || c == b) {
        return Err(Error::Basis(format!(
            "coordinates {input_coords:?} / ({a}, {b}) invalid for k = {k}"
        )));
    }
    let source = PatchSpec {
        layer_index: basis.layer_index,
        fixed_coords: input_coords.iter().map(|&c| (c, 0.0)).collect(),
        rotation: None,
    };
    source.validate(k)?;
    let acts = patched_activations_with(model, traces, basis, basis.layer_index, None, |_, c| {
        for &i in input_coords {
            c[i] = 0.0;
        }
    })?;
    let proj = basis.project(acts.view())?;
    let coords = Array2::from_shape_fn((proj.nrows(), 2), |(i, j)| proj[[i, if j == 0 { a } else { b }]]);
    let (clusters, silhouettes) = select_k(coords.view(), &BITS2_K, seed)?;
    let scores = coords
        .rows()
        .into_iter()
        .zip(&clusters.labels)
        .map(|(p, &l)| {
            let c = clusters.centroids.row(l);
            ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt()
        })
        .collect();
    Ok(BitsRecovery {
        estimate: ShareEstimate {
            kind: EstimateKind::Bits2,
            values: clusters.labels.iter().map(|&l| l as u8).collect(),
            scores,
            source,
        },
        coords,
        silhouettes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interp::{pca_fit, patched_activations};
    use crate::nn::{init_model, MlpSpec};
    use crate::rng;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn clustered_coordinates_match_patched_projection() {
        let model = init_model(&MlpSpec::id_default(6), 1).unwrap();
        let mut r = rng::seeded(4);
        let x = Array2::from_shape_fn((600, 6), |_| r.sample::<f64, _>(StandardNormal));
        let acts = model.hidden_activations(x.view(), 2).unwrap();
        let basis = pca_fit(acts.view(), 4, 2).unwrap();
        let rec = recover_share_bits(&model, x.view(), &basis, &[0, 1], (2, 3), 5).unwrap();
        let patch = PatchSpec {
            layer_index: 2,
            fixed_coords: vec![(0, 0.0), (1, 0.0)],
            rotation: None,
        };
        let patched = patched_activations(&model, x.view(), &basis, &patch).unwrap();
        let proj = basis.project(patched.view()).unwrap();
        for i in 0..600 {
            assert_eq!(rec.coords[[i, 0]], proj[[i, 2]]);
            assert_eq!(rec.coords[[i, 1]], proj[[i, 3]]);
            assert!(proj[[i, 0]].abs() < 1e-9 && proj[[i, 1]].abs() < 1e-9);
        }
        assert_eq!(rec.estimate.source, patch);
        assert!(rec.estimate.values.iter().all(|&v| v < 4));
    }

    #[test]
    fn overlapping_coordinates_are_rejected() {
        let model = init_model(&MlpSpec::id_default(6), 1).unwrap();
        let x = Array2::from_shape_fn((50, 6), |(i, j)| (i * j) as f64 * 0.01);
        let acts = model.hidden_activations(x.view(), 0).unwrap();
        let basis = pca_fit(acts.view(), 3, 0).unwrap();
        assert!(recover_share_bits(&model, x.view(), &basis, &[0], (0, 1), 0).is_err());
        assert!(recover_share_bits(&model, x.view(), &basis, &[0], (1, 3), 0).is_err());
    }
}
