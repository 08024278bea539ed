//! Streamlines, tractograms, resampling and the MDF streamline distance.

use std::ops::{Add, Mul, Sub};

use thiserror::Error;

/// Number of points per streamline after resampling.
pub const DEFAULT_N_POINTS: usize = 14;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("streamline needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("non-finite coordinate in streamline")]
    NonFinite,
    #[error("streamline has zero arc length")]
    ZeroLength,
    #[error("resampling needs at least 2 output points, got {0}")]
    BadSampleCount(usize),
    #[error("point counts differ: {0} vs {1}")]
    PointCountMismatch(usize, usize),
    #[error("tractogram is empty")]
    EmptyTractogram,
    #[error("label count {labels} does not match streamline count {streamlines}")]
    LabelCount { labels: usize, streamlines: usize },
}

/// A point in millimetres.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Self::new(s[0], s[1], s[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, o: Self) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn distance(self, o: Self) -> f64 {
        (self - o).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn lerp(self, o: Self, t: f64) -> Self {
        self + (o - self) * t
    }
}

impl Add for Point3 {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Point3 {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Self;
    fn mul(self, s: f64) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }
}

/// An ordered polyline of at least two finite points.
#[derive(Clone, Debug, PartialEq)]
pub struct Streamline {
    points: Vec<Point3>,
}

impl Streamline {
    pub fn new(points: Vec<Point3>) -> Result<Self, GeometryError> {
        if points.len() < 2 {
            return Err(GeometryError::TooFewPoints(points.len()));
        }
        if !points.iter().all(|p| p.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn reversed(&self) -> Self {
        let mut points = self.points.clone();
        points.reverse();
        Self { points }
    }

    pub fn arc_length(&self) -> f64 {
        self.points.windows(2).map(|w| w[0].distance(w[1])).sum()
    }

    /// Applies `f` to every point. The result must stay finite.
    pub fn map_points(&self, f: impl Fn(Point3) -> Point3) -> Result<Self, GeometryError> {
        Self::new(self.points.iter().map(|&p| f(p)).collect())
    }
}

/// Resamples `s` to `n` points at uniform arc-length fractions using linear
/// interpolation along the polyline. Endpoints are copied exactly.
pub fn resample_streamline(s: &Streamline, n: usize) -> Result<Streamline, GeometryError> {
    if n < 2 {
        return Err(GeometryError::BadSampleCount(n));
    }
    let pts = s.points();
    let mut cum = Vec::with_capacity(pts.len());
    cum.push(0.0);
    for w in pts.windows(2) {
        let last = *cum.last().unwrap();
        cum.push(last + w[0].distance(w[1]));
    }
    let total = *cum.last().unwrap();
    if !(total > 0.0) {
        return Err(GeometryError::ZeroLength);
    }
    let mut out = Vec::with_capacity(n);
    out.push(pts[0]);
    let mut seg = 0;
    for k in 1..n - 1 {
        let target = total * k as f64 / (n - 1) as f64;
        while seg + 1 < pts.len() - 1 && cum[seg + 1] < target {
            seg += 1;
        }
        let len = cum[seg + 1] - cum[seg];
        let t = if len > 0.0 {
            (target - cum[seg]) / len
        } else {
            0.0
        };
        out.push(pts[seg].lerp(pts[seg + 1], t.clamp(0.0, 1.0)));
    }
    out.push(pts[pts.len() - 1]);
    Streamline::new(out)
}

/// A collection of streamlines with optional per-streamline labels
/// (`-1` marks an unassigned or rejected streamline).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Tractogram {
    streamlines: Vec<Streamline>,
    labels: Option<Vec<i64>>,
}

impl Tractogram {
    pub fn new(streamlines: Vec<Streamline>) -> Self {
        Self {
            streamlines,
            labels: None,
        }
    }

    pub fn with_labels(
        streamlines: Vec<Streamline>,
        labels: Vec<i64>,
    ) -> Result<Self, GeometryError> {
        if labels.len() != streamlines.len() {
            return Err(GeometryError::LabelCount {
                labels: labels.len(),
                streamlines: streamlines.len(),
            });
        }
        Ok(Self {
            streamlines,
            labels: Some(labels),
        })
    }

    pub fn streamlines(&self) -> &[Streamline] {
        &self.streamlines
    }

    pub fn labels(&self) -> Option<&[i64]> {
        self.labels.as_deref()
    }

    pub fn set_labels(&mut self, labels: Option<Vec<i64>>) -> Result<(), GeometryError> {
        if let Some(l) = &labels {
            if l.len() != self.streamlines.len() {
                return Err(GeometryError::LabelCount {
                    labels: l.len(),
                    streamlines: self.streamlines.len(),
                });
            }
        }
        self.labels = labels;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.streamlines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.streamlines.is_empty()
    }

    /// `Some(n)` when every streamline has exactly `n` points.
    pub fn uniform_point_count(&self) -> Option<usize> {
        let n = self.streamlines.first()?.len();
        self.streamlines.iter().all(|s| s.len() == n).then_some(n)
    }

    pub fn resampled(&self, n: usize) -> Result<Self, GeometryError> {
        let streamlines = self
            .streamlines
            .iter()
            .map(|s| resample_streamline(s, n))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            streamlines,
            labels: self.labels.clone(),
        })
    }

    /// Keeps the streamlines at `indices`, in that order, with their labels.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            streamlines: indices
                .iter()
                .map(|&i| self.streamlines[i].clone())
                .collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    /// All points, streamline-major, flattened to `[x0, y0, z0, x1, ...]`.
    pub fn flat_coords(&self) -> Vec<f64> {
        self.streamlines
            .iter()
            .flat_map(|s| s.points().iter().flat_map(|p| p.to_array()))
            .collect()
    }

    pub fn points(&self) -> impl Iterator<Item = Point3> + '_ {
        self.streamlines
            .iter()
            .flat_map(|s| s.points().iter().copied())
    }

    /// Axis-aligned bounding box `(min, max)`, `None` when empty.
    pub fn bounds(&self) -> Option<(Point3, Point3)> {
        let mut it = self.points();
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), p| {
            (
                Point3::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z)),
                Point3::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z)),
            )
        }))
    }

    /// Applies a point map to every streamline, preserving order and labels.
    pub fn map_points(&self, f: impl Fn(Point3) -> Point3) -> Result<Self, GeometryError> {
        let streamlines = self
            .streamlines
            .iter()
            .map(|s| s.map_points(&f))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            streamlines,
            labels: self.labels.clone(),
        })
    }

    /// Rebuilds a tractogram from flat coordinates laid out like
    /// [`Tractogram::flat_coords`], with `n_points` points per streamline.
    pub fn from_flat_coords(
        coords: &[f64],
        n_points: usize,
        labels: Option<Vec<i64>>,
    ) -> Result<Self, GeometryError> {
        let streamlines = coords
            .chunks(n_points * 3)
            .map(|c| Streamline::new(c.chunks(3).map(Point3::from_slice).collect()))
            .collect::<Result<Vec<_>, _>>()?;
        let mut t = Self::new(streamlines);
        t.set_labels(labels)?;
        Ok(t)
    }
}

/// A 3x4 affine map `x' = M x + t`, stored row-major as `[M | t]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine3 {
    pub m: [[f64; 4]; 3],
}

impl Default for Affine3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Affine3 {
    pub const fn identity() -> Self {
        Self {
            m: [
                [1.0, 0.0, 0.0, 0.0],
                [0.0, 1.0, 0.0, 0.0],
                [0.0, 0.0, 1.0, 0.0],
            ],
        }
    }

    pub fn translation(t: Point3) -> Self {
        let mut a = Self::identity();
        a.m[0][3] = t.x;
        a.m[1][3] = t.y;
        a.m[2][3] = t.z;
        a
    }

    pub fn from_linear(lin: [[f64; 3]; 3], t: Point3) -> Self {
        let tv = t.to_array();
        let mut m = [[0.0; 4]; 3];
        for i in 0..3 {
            m[i][..3].copy_from_slice(&lin[i]);
            m[i][3] = tv[i];
        }
        Self { m }
    }

    pub fn linear(&self) -> [[f64; 3]; 3] {
        let mut l = [[0.0; 3]; 3];
        for i in 0..3 {
            l[i].copy_from_slice(&self.m[i][..3]);
        }
        l
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        let r =
            |i: usize| self.m[i][0] * p.x + self.m[i][1] * p.y + self.m[i][2] * p.z + self.m[i][3];
        Point3::new(r(0), r(1), r(2))
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        let mut m = [[0.0; 4]; 3];
        for i in 0..3 {
            for j in 0..4 {
                let mut v: f64 = (0..3).map(|k| self.m[i][k] * other.m[k][j]).sum();
                if j == 3 {
                    v += self.m[i][3];
                }
                m[i][j] = v;
            }
        }
        Self { m }
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().flatten().all(|v| v.is_finite())
    }
}

pub fn apply_affine(t: &Tractogram, a: &Affine3) -> Result<Tractogram, GeometryError> {
    if !a.is_finite() {
        return Err(GeometryError::NonFinite);
    }
    t.map_points(|p| a.apply(p))
}

/// Mean pointwise distance in direct order and in flipped order.
///
/// Term `k` is added to term `n - 1 - k` before accumulating, which makes the
/// result bit-identical under swapping or reversing either argument.
pub fn mdf_components(a: &[Point3], b: &[Point3]) -> (f64, f64) {
    let n = a.len();
    let direct = |k: usize| a[k].distance(b[k]);
    let flipped = |k: usize| a[k].distance(b[n - 1 - k]);
    let mut d = 0.0;
    let mut f = 0.0;
    for k in 0..n / 2 {
        d += direct(k) + direct(n - 1 - k);
        f += flipped(k) + flipped(n - 1 - k);
    }
    if n % 2 == 1 {
        d += direct(n / 2);
        f += flipped(n / 2);
    }
    (d / n as f64, f / n as f64)
}

/// Minimum average direct-flip distance between equally sampled streamlines.
pub fn mdf_distance(a: &Streamline, b: &Streamline) -> Result<f64, GeometryError> {
    if a.len() != b.len() {
        return Err(GeometryError::PointCountMismatch(a.len(), b.len()));
    }
    let (d, f) = mdf_components(a.points(), b.points());
    Ok(d.min(f))
}

/// Dense symmetric matrix of MDF distances.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Restriction to `indices` (rows and columns, in that order).
    pub fn submatrix(&self, indices: &[usize]) -> Self {
        let n = indices.len();
        let mut values = Vec::with_capacity(n * n);
        for &i in indices {
            for &j in indices {
                values.push(self.get(i, j));
            }
        }
        Self { n, values }
    }
}

pub fn pairwise_mdf(t: &Tractogram) -> Result<DistanceMatrix, GeometryError> {
    let n = t.len();
    if n == 0 {
        return Err(GeometryError::EmptyTractogram);
    }
    let np = t.streamlines()[0].len();
    if let Some(s) = t.streamlines().iter().find(|s| s.len() != np) {
        return Err(GeometryError::PointCountMismatch(np, s.len()));
    }
    let mut values = vec![0.0; n * n];
    let sl = t.streamlines();
    for i in 0..n {
        for j in i + 1..n {
            let (d, f) = mdf_components(sl[i].points(), sl[j].points());
            let v = d.min(f);
            values[i * n + j] = v;
            values[j * n + i] = v;
        }
    }
    Ok(DistanceMatrix { n, values })
}
