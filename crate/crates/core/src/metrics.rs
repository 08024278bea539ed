//! Evaluation measures for registration and parcellation quality.
//!
//! Every measure carries a `definition_id` naming the convention implemented
//! here, so reports are never mistaken for numbers computed elsewhere.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{mdf_components, GeometryError, Point3, Tractogram};

pub const ABD_ID: &str = "abd.symmetric_mean_min_mdf.v1";
pub const WDICE_ID: &str = "wdice.normalized_visitation_overlap.v1";
pub const ALPHA_ID: &str = "alpha.mean_member_to_medoid_mdf.v1";
pub const WMPG_ID: &str = "wmpg.fraction_clusters_min_count.v1";
pub const ARI_ID: &str = "ari.contingency_excluding_rejected.v1";
pub const REJECTION_ID: &str = "rejection_rate.fraction_label_minus_one.v1";

pub const DEFAULT_SPACING: f64 = 2.0;
pub const DEFAULT_MIN_COUNT: usize = 10;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty tractogram")]
    Empty,
    #[error("both tractograms are empty")]
    BothEmpty,
    #[error("streamlines must be resampled to a common point count")]
    NotResampled,
    #[error("{labels} labels for {streamlines} streamlines")]
    LabelCount { labels: usize, streamlines: usize },
    #[error("every streamline is rejected")]
    AllRejected,
    #[error("voxel spacing must be positive, got {0}")]
    BadSpacing(f64),
    #[error("wmpg needs K >= 1 and min_count >= 1")]
    BadWmpgArgs,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn check_resampled(a: &Tractogram, b: &Tractogram) -> Result<(), MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::Empty);
    }
    match (a.uniform_point_count(), b.uniform_point_count()) {
        (Some(x), Some(y)) if x == y => Ok(()),
        _ => Err(MetricsError::NotResampled),
    }
}

fn mdf(a: &[Point3], b: &[Point3]) -> f64 {
    let (d, f) = mdf_components(a, b);
    d.min(f)
}

/// `½[(1/N_a) Σ_i min_j d(a_i, b_j) + (1/N_b) Σ_j min_i d(a_i, b_j)]` with MDF `d`.
pub fn abd(a: &Tractogram, b: &Tractogram) -> Result<f64, MetricsError> {
    check_resampled(a, b)?;
    let (sa, sb) = (a.streamlines(), b.streamlines());
    let mut row_min = vec![f64::INFINITY; sa.len()];
    let mut col_min = vec![f64::INFINITY; sb.len()];
    for (i, s) in sa.iter().enumerate() {
        for (j, u) in sb.iter().enumerate() {
            let d = mdf(s.points(), u.points());
            row_min[i] = row_min[i].min(d);
            col_min[j] = col_min[j].min(d);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(0.5 * (mean(&row_min) + mean(&col_min)))
}

/// Per-voxel streamline visitation counts on an axis-aligned lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub origin: Point3,
    pub spacing: f64,
    pub dims: [usize; 3],
    pub counts: Vec<u32>,
}

impl VoxelGrid {
    /// Grid whose lattice is aligned to multiples of `spacing` and covers `lo..=hi`.
    pub fn covering(lo: Point3, hi: Point3, spacing: f64) -> Self {
        let o = |v: f64| (v / spacing).floor() * spacing;
        let origin = Point3::new(o(lo.x), o(lo.y), o(lo.z));
        let n = |h: f64, o: f64| ((h - o) / spacing).floor() as usize + 1;
        let dims = [n(hi.x, origin.x), n(hi.y, origin.y), n(hi.z, origin.z)];
        Self {
            origin,
            spacing,
            dims,
            counts: vec![0; dims[0] * dims[1] * dims[2]],
        }
    }

    fn index_of(&self, p: Point3) -> Option<usize> {
        let c = [
            ((p.x - self.origin.x) / self.spacing).floor(),
            ((p.y - self.origin.y) / self.spacing).floor(),
            ((p.z - self.origin.z) / self.spacing).floor(),
        ];
        let mut idx = [0usize; 3];
        for a in 0..3 {
            if c[a] < 0.0 || c[a] as usize >= self.dims[a] {
                return None;
            }
            idx[a] = c[a] as usize;
        }
        Some((idx[0] * self.dims[1] + idx[1]) * self.dims[2] + idx[2])
    }

    /// Adds each streamline once to every voxel its polyline passes through.
    pub fn add(&mut self, t: &Tractogram) {
        let step = self.spacing / 8.0;
        let mut seen = HashSet::new();
        for s in t.streamlines() {
            seen.clear();
            let pts = s.points();
            for w in pts.windows(2) {
                let len = w[0].distance(w[1]);
                let n = (len / step).ceil().max(1.0) as usize;
                for k in 0..=n {
                    if let Some(i) = self.index_of(w[0].lerp(w[1], k as f64 / n as f64)) {
                        seen.insert(i);
                    }
                }
            }
            for &i in &seen {
                self.counts[i] += 1;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }
}

/// Visitation counts of `t` on a grid covering its own bounds.
pub fn voxelize(t: &Tractogram, spacing: f64) -> Result<VoxelGrid, MetricsError> {
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(MetricsError::BadSpacing(spacing));
    }
    let Some((lo, hi)) = t.bounds() else {
        return Ok(VoxelGrid::covering(
            Point3::default(),
            Point3::default(),
            spacing,
        ));
    };
    let mut g = VoxelGrid::covering(lo, hi, spacing);
    g.add(t);
    Ok(g)
}

/// Weighted overlap of the normalized visitation maps of `a` and `b`:
/// `Σ_{v ∈ A∩B} (w_a + w_b) / (Σ w_a + Σ w_b)` where `w = count / total`.
pub fn wdice(a: &Tractogram, b: &Tractogram, spacing: f64) -> Result<f64, MetricsError> {
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(MetricsError::BadSpacing(spacing));
    }
    let bounds = match (a.bounds(), b.bounds()) {
        (None, None) => return Err(MetricsError::BothEmpty),
        (Some(x), None) | (None, Some(x)) => x,
        (Some((l1, h1)), Some((l2, h2))) => (
            Point3::new(l1.x.min(l2.x), l1.y.min(l2.y), l1.z.min(l2.z)),
            Point3::new(h1.x.max(h2.x), h1.y.max(h2.y), h1.z.max(h2.z)),
        ),
    };
    let mut ga = VoxelGrid::covering(bounds.0, bounds.1, spacing);
    let mut gb = ga.clone();
    ga.add(a);
    gb.add(b);
    let (ta, tb) = (ga.total() as f64, gb.total() as f64);
    let (mut overlap, mut sa, mut sb) = (0.0, 0.0, 0.0);
    for (&ca, &cb) in ga.counts.iter().zip(&gb.counts) {
        let wa = if ta > 0.0 { ca as f64 / ta } else { 0.0 };
        let wb = if tb > 0.0 { cb as f64 / tb } else { 0.0 };
        sa += wa;
        sb += wb;
        if ca > 0 && cb > 0 {
            overlap += wa + wb;
        }
    }
    Ok(overlap / (sa + sb))
}

fn group_by_label(labels: &[i64]) -> BTreeMap<i64, Vec<usize>> {
    let mut groups: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        if l >= 0 {
            groups.entry(l).or_default().push(i);
        }
    }
    groups
}

/// Mean over non-rejected clusters of the mean MDF from each member to the
/// cluster medoid (the member with the smallest summed MDF, ties to the first).
pub fn alpha_compactness(t: &Tractogram, labels: &[i64]) -> Result<f64, MetricsError> {
    if labels.len() != t.len() {
        return Err(MetricsError::LabelCount {
            labels: labels.len(),
            streamlines: t.len(),
        });
    }
    if !t.is_empty() && t.uniform_point_count().is_none() {
        return Err(MetricsError::NotResampled);
    }
    let groups = group_by_label(labels);
    if groups.is_empty() {
        return Err(MetricsError::AllRejected);
    }
    let s = t.streamlines();
    let mut total = 0.0;
    for members in groups.values() {
        let m = members.len();
        let mut d = vec![0.0; m * m];
        for a in 0..m {
            for b in 0..a {
                let v = mdf(s[members[a]].points(), s[members[b]].points());
                d[a * m + b] = v;
                d[b * m + a] = v;
            }
        }
        let sums: Vec<f64> = (0..m).map(|a| d[a * m..(a + 1) * m].iter().sum()).collect();
        let mut medoid = 0;
        for a in 1..m {
            if sums[a] < sums[medoid] {
                medoid = a;
            }
        }
        total += sums[medoid] / m as f64;
    }
    Ok(total / groups.len() as f64)
}

/// Mean over subjects of the fraction of the `k` clusters holding at least
/// `min_count` streamlines, as a percentage.
pub fn wmpg(
    per_subject_labels: &[Vec<i64>],
    k: usize,
    min_count: usize,
) -> Result<f64, MetricsError> {
    if k == 0 || min_count == 0 {
        return Err(MetricsError::BadWmpgArgs);
    }
    if per_subject_labels.is_empty() {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for labels in per_subject_labels {
        let mut counts = vec![0usize; k];
        for &l in labels {
            if let Ok(j) = usize::try_from(l) {
                if j < k {
                    counts[j] += 1;
                }
            }
        }
        acc += counts.iter().filter(|&&c| c >= min_count).count() as f64 / k as f64;
    }
    Ok(100.0 * acc / per_subject_labels.len() as f64)
}

fn choose2(n: u64) -> f64 {
    (n * n.saturating_sub(1) / 2) as f64
}

/// Adjusted Rand index over the streamlines neither labelling rejects.
pub fn adjusted_rand_index(a: &[i64], b: &[i64]) -> Result<f64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LabelCount {
            labels: a.len(),
            streamlines: b.len(),
        });
    }
    let mut table: HashMap<(i64, i64), u64> = HashMap::new();
    let mut rows: HashMap<i64, u64> = HashMap::new();
    let mut cols: HashMap<i64, u64> = HashMap::new();
    let mut n = 0u64;
    for (&x, &y) in a.iter().zip(b) {
        if x < 0 || y < 0 {
            continue;
        }
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
        n += 1;
    }
    if n == 0 {
        return Err(MetricsError::AllRejected);
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let sa: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sb: f64 = cols.values().map(|&c| choose2(c)).sum();
    let total = choose2(n);
    let expected = if total > 0.0 { sa * sb / total } else { 0.0 };
    let max = 0.5 * (sa + sb);
    if max == expected {
        // Both partitions trivial (one cluster or all singletons).
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Fraction of streamlines labelled `-1`.
pub fn rejection_rate(labels: &[i64]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    labels.iter().filter(|&&l| l < 0).count() as f64 / labels.len() as f64
}

/// One entry of a metrics report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub value: f64,
    pub definition_id: String,
    pub parameters: serde_json::Value,
}

/// `{metric_name: {value, definition_id, parameters}}`.
pub type MetricsReport = BTreeMap<String, MetricEntry>;

pub fn entry(value: f64, definition_id: &str, parameters: serde_json::Value) -> MetricEntry {
    MetricEntry {
        value,
        definition_id: definition_id.to_string(),
        parameters,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Streamline;

    fn line(y: f64) -> Streamline {
        Streamline::new((0..5).map(|k| Point3::new(k as f64, y, 0.0)).collect()).unwrap()
    }

    #[test]
    fn abd_examples() {
        let a = Tractogram::new(vec![line(0.0), line(10.0)]);
        assert_eq!(abd(&a, &a).unwrap(), 0.0);
        let b = Tractogram::new(vec![line(3.0)]);
        assert!((abd(&Tractogram::new(vec![line(0.0)]), &b).unwrap() - 3.0).abs() < 1e-12);
        assert!(matches!(
            abd(&a, &Tractogram::new(vec![])),
            Err(MetricsError::Empty)
        ));
    }

    #[test]
    fn voxelize_examples() {
        let g = voxelize(&Tractogram::new(vec![]), 2.0).unwrap();
        assert_eq!(g.total(), 0);
        let s =
            Streamline::new(vec![Point3::new(0.5, 0.5, 0.5), Point3::new(3.5, 0.5, 0.5)]).unwrap();
        let g = voxelize(&Tractogram::new(vec![s.clone()]), 1.0).unwrap();
        assert_eq!(g.dims, [4, 1, 1]);
        assert_eq!(g.counts, vec![1, 1, 1, 1]);
        let g = voxelize(&Tractogram::new(vec![s.clone(), s]), 1.0).unwrap();
        assert_eq!(g.counts, vec![2, 2, 2, 2]);
    }

    #[test]
    fn wdice_examples() {
        let a = Tractogram::new(vec![line(0.0), line(1.0)]);
        assert_eq!(wdice(&a, &a, 1.0).unwrap(), 1.0);
        let far = Tractogram::new(vec![line(50.0)]);
        assert_eq!(wdice(&a, &far, 1.0).unwrap(), 0.0);
        let e = Tractogram::new(vec![]);
        assert!(matches!(wdice(&e, &e, 1.0), Err(MetricsError::BothEmpty)));
    }

    #[test]
    fn alpha_examples() {
        let t = Tractogram::new(vec![line(0.0), line(4.0)]);
        assert!((alpha_compactness(&t, &[0, 0]).unwrap() - 2.0).abs() < 1e-12);
        let same = Tractogram::new(vec![line(1.0), line(1.0), line(7.0)]);
        assert_eq!(alpha_compactness(&same, &[0, 0, 1]).unwrap(), 0.0);
        assert!(matches!(
            alpha_compactness(&t, &[-1, -1]),
            Err(MetricsError::AllRejected)
        ));
    }

    #[test]
    fn wmpg_examples() {
        let full = vec![vec![0, 1, 2, 3], vec![3, 2, 1, 0]];
        assert_eq!(wmpg(&full, 4, 1).unwrap(), 100.0);
        let partial = vec![vec![0, 1, 2, 3], vec![0, 1, 2, 2]];
        assert_eq!(wmpg(&partial, 4, 1).unwrap(), 87.5);
    }

    #[test]
    fn ari_examples() {
        assert_eq!(
            adjusted_rand_index(&[0, 0, 1, 1], &[0, 0, 1, 1]).unwrap(),
            1.0
        );
        assert_eq!(
            adjusted_rand_index(&[0, 0, 1, 1, 2], &[5, 5, 3, 3, 9]).unwrap(),
            1.0
        );
        // Contingency [[2,1],[0,3]] (rows a, cols b):
        // index = C(2,2)+C(3,2) = 4, rows C(3,2)+C(3,2) = 6, cols C(2,2)+C(4,2) = 7,
        // expected = 6*7/15 = 2.8, max = 6.5, ARI = 1.2/3.7.
        let a = [0, 0, 0, 1, 1, 1];
        let b = [0, 0, 1, 1, 1, 1];
        assert!((adjusted_rand_index(&a, &b).unwrap() - 1.2 / 3.7).abs() < 1e-12);
    }
}
