use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

const MAX_ITER: usize = 300;
const MAX_RETRIES: usize = 5;
/// Silhouette is computed on at most this many points (seeded subsample).
const SILHOUETTE_SAMPLE: usize = 4000;

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub k: usize,
    pub labels: Vec<usize>,
    /// `k x dim`
    pub centroids: Array2<f64>,
    pub inertia: f64,
}

fn dist2(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// One k-means++ run. Returns `None` when a cluster ends up empty.
fn kmeans_once(points: ArrayView2<f64>, k: usize, seed: u64) -> Option<Clustering> {
    let n = points.nrows();
    let mut r = rng::seeded(seed);
    let mut centroids = Array2::zeros((k, points.ncols()));
    centroids.row_mut(0).assign(&points.row(r.random_range(0..n)));
    let mut d2: Vec<f64> = points.rows().into_iter().map(|p| dist2(p, centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut t = r.random_range(0.0..total);
            d2.iter()
                .position(|&d| {
                    t -= d;
                    t < 0.0
                })
                .unwrap_or(n - 1)
        } else {
            r.random_range(0..n)
        };
        centroids.row_mut(c).assign(&points.row(pick));
        for (i, p) in points.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(dist2(p, centroids.row(c)));
        }
    }

    let mut labels = vec![usize::MAX; n];
    for _ in 0..MAX_ITER {
        let mut changed = false;
        for (i, p) in points.rows().into_iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| dist2(p, centroids.row(a)).total_cmp(&dist2(p, centroids.row(b))))
                .unwrap();
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        let mut sums = Array2::<f64>::zeros(centroids.raw_dim());
        let mut counts = vec![0usize; k];
        for (i, p) in points.rows().into_iter().enumerate() {
            let mut row = sums.row_mut(labels[i]);
            row += &p;
            counts[labels[i]] += 1;
        }
        if counts.contains(&0) {
            return None;
        }
        for c in 0..k {
            centroids.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
        }
        if !changed {
            break;
        }
    }
    let inertia = points
        .rows()
        .into_iter()
        .zip(&labels)
        .map(|(p, &l)| dist2(p, centroids.row(l)))
        .sum();
    Some(Clustering {
        k,
        labels,
        centroids,
        inertia,
    })
}

/// Seeded k-means++ (Lloyd iterations). An empty cluster triggers a retry
/// with a derived seed, at most five times.
pub fn kmeans(points: ArrayView2<f64>, k: usize, seed: u64) -> Result<Clustering> {
    if k < 1 || points.nrows() < k {
        return Err(Error::Clustering(format!(
            "cannot form {k} clusters from {} points",
            points.nrows()
        )));
    }
    for attempt in 0..=MAX_RETRIES {
        let s = rng::derive_seed(seed, &format!("kmeans-{attempt}"));
        if let Some(c) = kmeans_once(points, k, s) {
            return Ok(c);
        }
        log::debug!("k-means with k = {k} produced an empty cluster (attempt {attempt})");
    }
    Err(Error::Clustering(format!(
        "k = {k} left a cluster empty after {MAX_RETRIES} retries"
    )))
}

/// Mean silhouette coefficient of a labelling.
pub fn silhouette(points: ArrayView2<f64>, labels: &[usize], k: usize) -> f64 {
    let n = points.nrows();
    let mut total = 0.0;
    for i in 0..n {
        let mut sum = vec![0.0; k];
        let mut cnt = vec![0usize; k];
        for j in 0..n {
            if i != j {
                sum[labels[j]] += dist2(points.row(i), points.row(j)).sqrt();
                cnt[labels[j]] += 1;
            }
        }
        let own = labels[i];
        if cnt[own] == 0 {
            continue;
        }
        let a = sum[own] / cnt[own] as f64;
        let b = (0..k)
            .filter(|&c| c != own && cnt[c] > 0)
            .map(|c| sum[c] / cnt[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if b.is_finite() {
            let m = a.max(b);
            if m > 0.0 {
                total += (b - a) / m;
            }
        }
    }
    total / n as f64
}

/// Clusters `points` for every `k` in `ks` and keeps the labelling with the
/// highest silhouette (ties to the smaller `k`).
pub fn select_k(points: ArrayView2<f64>, ks: &[usize], seed: u64) -> Result<(Clustering, Vec<(usize, f64)>)> {
    let n = points.nrows();
    let sample: Vec<usize> = if n > SILHOUETTE_SAMPLE {
        let mut s = index::sample(&mut rng::seeded(rng::derive_seed(seed, "silhouette")), n, SILHOUETTE_SAMPLE).into_vec();
        s.sort_unstable();
        s
    } else {
        (0..n).collect()
    };
    let sub = points.select(Axis(0), &sample);
    let mut best: Option<(Clustering, f64)> = None;
    let mut scores = Vec::with_capacity(ks.len());
    for &k in ks {
        let c = kmeans(points, k, seed)?;
        let sub_labels: Vec<usize> = sample.iter().map(|&i| c.labels[i]).collect();
        let s = silhouette(sub.view(), &sub_labels, k);
        scores.push((k, s));
        if best.as_ref().is_none_or(|(_, b)| s > *b) {
            best = Some((c, s));
        }
    }
    let (c, _) = best.ok_or_else(|| Error::Clustering("no candidate k".into()))?;
    Ok((c, scores))
}
