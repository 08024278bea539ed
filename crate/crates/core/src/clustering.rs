//! Deep embedded clustering on streamline embeddings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tractjoint_autodiff::{Tape, Tensor, TensorError, Var};

/// Cluster mass floor used by [`target_distribution`].
pub const MASS_FLOOR: f64 = 1e-12;
/// Clusters whose total soft mass falls below this are reported as dead.
pub const DEAD_MASS: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum ClusteringError {
    #[error("need at least as many embeddings ({n}) as clusters ({k})")]
    TooFewPoints { n: usize, k: usize },
    #[error("cluster count must be positive")]
    ZeroClusters,
    #[error("embedding dimension {z} does not match centroid dimension {mu}")]
    DimMismatch { z: usize, mu: usize },
    #[error("soft assignment entry ({row}, {col}) is not strictly positive")]
    NonPositive { row: usize, col: usize },
    #[error("assignment matrices have shapes {0:?} and {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftAssignments(pub Tensor);

#[derive(Clone, Debug, PartialEq)]
pub struct TargetDistribution {
    pub p: Tensor,
    /// Clusters whose soft mass was below [`DEAD_MASS`].
    pub dead_clusters: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid, ties to the lowest index.
fn nearest(row: &[f64], centroids: &Tensor) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for j in 0..centroids.nrows() {
        let d = sq_dist(row, centroids.row(j));
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing or `max_iter` is reached.
pub fn kmeans_init(
    z: &Tensor,
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<Tensor, ClusteringError> {
    let n = z.nrows();
    if k == 0 {
        return Err(ClusteringError::ZeroClusters);
    }
    if n < k {
        return Err(ClusteringError::TooFewPoints { n, k });
    }
    let d = z.row_len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![rng.random_range(0..n)];
    let mut dist: Vec<f64> = (0..n)
        .map(|i| sq_dist(z.row(i), z.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                if r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            // Guard against rounding landing on an already chosen point.
            if dist[pick] == 0.0 {
                pick = dist.iter().rposition(|&w| w > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        for (i, di) in dist.iter_mut().enumerate() {
            *di = di.min(sq_dist(z.row(i), z.row(next)));
        }
    }
    let mut data = Vec::with_capacity(k * d);
    for &c in &chosen {
        data.extend_from_slice(z.row(c));
    }
    let mut centroids = Tensor::new(vec![k, d], data)?;
    let mut assign = vec![usize::MAX; n];
    for _ in 0..max_iter {
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let (j, _) = nearest(z.row(i), &centroids);
            if *a != j {
                *a = j;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a * d..(a + 1) * d].iter_mut().zip(z.row(i)) {
                *s += v;
            }
        }
        for j in 0..k {
            // An emptied cluster keeps its previous centroid.
            if counts[j] > 0 {
                for (c, s) in centroids
                    .row_mut(j)
                    .iter_mut()
                    .zip(&sums[j * d..(j + 1) * d])
                {
                    *c = s / counts[j] as f64;
                }
            }
        }
    }
    Ok(centroids)
}

/// Sum of squared distances from each embedding to its nearest centroid.
pub fn kmeans_cost(z: &Tensor, centroids: &Tensor) -> f64 {
    (0..z.nrows()).map(|i| nearest(z.row(i), centroids).1).sum()
}

fn check_dims(z: &Tensor, mu: &Tensor) -> Result<(), ClusteringError> {
    if z.ndim() != 2 || mu.ndim() != 2 || z.row_len() != mu.row_len() {
        return Err(ClusteringError::DimMismatch {
            z: z.shape().last().copied().unwrap_or(0),
            mu: mu.shape().last().copied().unwrap_or(0),
        });
    }
    if mu.nrows() == 0 {
        return Err(ClusteringError::ZeroClusters);
    }
    Ok(())
}

/// Student's-t soft assignment with one degree of freedom.
pub fn soft_assign(z: &Tensor, mu: &Tensor) -> Result<SoftAssignments, ClusteringError> {
    check_dims(z, mu)?;
    let (n, k) = (z.nrows(), mu.nrows());
    let mut q = Tensor::zeros(&[n, k]);
    for i in 0..n {
        let row = q.row_mut(i);
        for (j, r) in row.iter_mut().enumerate() {
            *r = 1.0 / (1.0 + sq_dist(z.row(i), mu.row(j)));
        }
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|r| *r /= s);
    }
    Ok(SoftAssignments(q))
}

/// Tape version of [`soft_assign`], written as a softmax of `-ln(1 + d^2)`.
pub fn soft_assign_var(tape: &mut Tape, z: Var, mu: Var) -> Result<Var, TensorError> {
    let d2 = tape.pairwise_sq_dist(z, mu)?;
    let one_plus = tape.add_scalar(d2, 1.0);
    let l = tape.log(one_plus);
    let neg = tape.scale(l, -1.0);
    tape.softmax(neg, 1)
}

/// Sharpened targets `p_ij ∝ q_ij^2 / f_j` with cluster mass `f_j = Σ_i q_ij`
/// floored at [`MASS_FLOOR`].
pub fn target_distribution(q: &SoftAssignments) -> TargetDistribution {
    let q = &q.0;
    let (n, k) = (q.nrows(), q.row_len());
    let mut mass = vec![0.0; k];
    for i in 0..n {
        for (m, v) in mass.iter_mut().zip(q.row(i)) {
            *m += v;
        }
    }
    let dead_clusters = mass.iter().filter(|&&m| m < DEAD_MASS).count();
    let mut p = Tensor::zeros(&[n, k]);
    for i in 0..n {
        let row = p.row_mut(i);
        for (j, r) in row.iter_mut().enumerate() {
            let v = q.row(i)[j];
            *r = v * v / mass[j].max(MASS_FLOOR);
        }
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|r| *r /= s);
        }
    }
    TargetDistribution { p, dead_clusters }
}

fn check_pair(p: &Tensor, q: &Tensor) -> Result<(), ClusteringError> {
    if p.shape() != q.shape() || p.ndim() != 2 {
        return Err(ClusteringError::ShapeMismatch(
            p.shape().to_vec(),
            q.shape().to_vec(),
        ));
    }
    for i in 0..q.nrows() {
        if let Some(j) = q.row(i).iter().position(|&v| !(v > 0.0)) {
            return Err(ClusteringError::NonPositive { row: i, col: j });
        }
    }
    Ok(())
}

/// `Σ_ij p_ij ln(p_ij / q_ij)` with `0 ln 0 = 0`.
pub fn kl_loss(p: &Tensor, q: &Tensor) -> Result<f64, ClusteringError> {
    check_pair(p, q)?;
    Ok(p.data()
        .iter()
        .zip(q.data())
        .map(|(&a, &b)| if a > 0.0 { a * (a / b).ln() } else { 0.0 })
        .sum())
}

/// Tape version of [`kl_loss`] with `p` held constant.
pub fn kl_loss_var(tape: &mut Tape, p: &Tensor, q: Var) -> Result<Var, TensorError> {
    let entropy: f64 = p
        .data()
        .iter()
        .map(|&a| if a > 0.0 { a * a.ln() } else { 0.0 })
        .sum();
    let pv = tape.constant(p.clone());
    let lq = tape.log(q);
    let cross = tape.mul(pv, lq)?;
    let cross = tape.sum(cross);
    let neg = tape.scale(cross, -1.0);
    Ok(tape.add_scalar(neg, entropy))
}

/// Arg-max cluster per row, or `-1` when the best probability is below `thr`.
pub fn hard_assign(q: &SoftAssignments, thr: f64) -> Vec<i64> {
    let q = &q.0;
    (0..q.nrows())
        .map(|i| {
            let row = q.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if row[best] >= thr {
                best as i64
            } else {
                -1
            }
        })
        .collect()
}

/// Summary written next to cluster label files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    #[serde(rename = "K")]
    pub k: usize,
    pub rejected_count: usize,
    pub sizes: Vec<usize>,
}

impl ClusterSummary {
    pub fn from_labels(labels: &[i64], k: usize) -> Self {
        let mut sizes = vec![0; k];
        let mut rejected_count = 0;
        for &l in labels {
            match usize::try_from(l) {
                Ok(j) if j < k => sizes[j] += 1,
                _ => rejected_count += 1,
            }
        }
        Self {
            k,
            rejected_count,
            sizes,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() < tol
    }

    #[test]
    fn soft_assign_examples() {
        let z = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let mu = Tensor::matrix(1, 2, vec![5.0, 5.0]).unwrap();
        assert_eq!(soft_assign(&z, &mu).unwrap().0.data(), &[1.0]);

        let mu = Tensor::matrix(2, 2, vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        let q = soft_assign(&z, &mu).unwrap().0;
        assert!(approx(q.data()[0], 0.5, 1e-15) && approx(q.data()[1], 0.5, 1e-15));

        let mu = Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let q = soft_assign(&z, &mu).unwrap().0;
        assert!(approx(q.data()[0], 2.0 / 3.0, 1e-15) && approx(q.data()[1], 1.0 / 3.0, 1e-15));
    }

    #[test]
    fn target_distribution_examples() {
        let onehot = SoftAssignments(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        assert_eq!(target_distribution(&onehot).p, onehot.0);

        // Row (0.8, 0.2) with both cluster masses equal to 1.
        let q = SoftAssignments(Tensor::matrix(2, 2, vec![0.8, 0.2, 0.2, 0.8]).unwrap());
        let p = target_distribution(&q).p;
        assert!(approx(p.data()[0], 16.0 / 17.0, 1e-15));
        assert!(approx(p.data()[1], 1.0 / 17.0, 1e-15));
    }

    #[test]
    fn dead_cluster_is_counted_not_fatal() {
        let q = SoftAssignments(Tensor::matrix(2, 3, vec![0.5, 0.5, 0.0, 0.4, 0.6, 0.0]).unwrap());
        let t = target_distribution(&q);
        assert_eq!(t.dead_clusters, 1);
        assert!(t.p.is_finite());
    }

    #[test]
    fn kl_examples() {
        let q = Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap();
        assert_eq!(kl_loss(&q, &q).unwrap(), 0.0);
        let p = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        assert!(approx(
            kl_loss(&p, &q).unwrap(),
            std::f64::consts::LN_2,
            1e-15
        ));
        let bad = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            kl_loss(&q, &bad),
            Err(ClusteringError::NonPositive { row: 0, col: 1 })
        ));
    }

    #[test]
    fn hard_assign_examples() {
        let q =
            SoftAssignments(Tensor::matrix(2, 3, vec![0.9, 0.1, 0.0, 0.35, 0.33, 0.32]).unwrap());
        assert_eq!(hard_assign(&q, 0.4), vec![0, -1]);
        assert_eq!(hard_assign(&q, 0.0), vec![0, 0]);
    }

    #[test]
    fn kmeans_with_k_equal_n() {
        let z = Tensor::matrix(4, 2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 3.0, 7.0, 7.0]).unwrap();
        let c = kmeans_init(&z, 4, 1, 300).unwrap();
        assert_eq!(kmeans_cost(&z, &c), 0.0);
        assert!(matches!(
            kmeans_init(&z, 5, 1, 300),
            Err(ClusteringError::TooFewPoints { .. })
        ));
    }

    #[test]
    fn summary_counts() {
        let s = ClusterSummary::from_labels(&[0, 1, -1, 1], 3);
        assert_eq!(s.sizes, vec![1, 2, 0]);
        assert_eq!(s.rejected_count, 1);
    }
}
