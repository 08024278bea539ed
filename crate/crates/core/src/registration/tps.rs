//! Closed-form thin-plate-spline transforms.
//!
//! `R(x) = A [x; 1] + sum_a W_a U(|x - c_a|)` with the radial kernel
//! `U(r) = r^2 ln r`, `U(0) = 0`. Fitting solves
//!
//! ```text
//! [ K + λI  P ] [ W ]   [ Y ]
//! [ P^T     0 ] [ C ] = [ 0 ]
//! ```
//!
//! where `K_ab = U(|c_a - c_b|)`, `P_a = [1, c_a]` and `Y` holds the targets.
//! The zero block enforces `sum_a W_a = 0` and `sum_a W_a c_a^T = 0`.

use std::fmt::Write as _;

use tractjoint_autodiff::{linalg::Lu, tps_kernel_sq, Tape, Tensor, TensorError, Var};

use super::RegistrationError;
use crate::geometry::{Affine3, GeometryError, Point3, Tractogram};

/// Thin-plate radial kernel `r^2 ln r` as a function of the squared radius.
pub fn tps_kernel(r_squared: f64) -> f64 {
    tps_kernel_sq(r_squared)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TpsTransform {
    pub affine: Affine3,
    pub weights: Vec<[f64; 3]>,
    pub control: Vec<Point3>,
}

impl TpsTransform {
    pub fn identity() -> Self {
        Self::from_affine(Affine3::identity())
    }

    /// A transform with no warp component.
    pub fn from_affine(affine: Affine3) -> Self {
        Self {
            affine,
            weights: Vec::new(),
            control: Vec::new(),
        }
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        let mut out = self.affine.apply(p);
        for (c, w) in self.control.iter().zip(&self.weights) {
            let u = tps_kernel((p - *c).norm_squared());
            out.x += u * w[0];
            out.y += u * w[1];
            out.z += u * w[2];
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.affine.is_finite()
            && self.weights.iter().flatten().all(|v| v.is_finite())
            && self.control.iter().all(|c| c.is_finite())
    }

    /// Frobenius norm of the warp coefficients.
    pub fn warp_norm(&self) -> f64 {
        self.weights
            .iter()
            .flatten()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Coefficients in solver layout: `A` warp rows followed by the affine
    /// rows `[t; M^T]`, shape `[A + 4, 3]`.
    pub fn coefficient_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity((self.weights.len() + 4) * 3);
        for w in &self.weights {
            data.extend_from_slice(w);
        }
        let m = &self.affine.m;
        data.extend_from_slice(&[m[0][3], m[1][3], m[2][3]]);
        for j in 0..3 {
            data.extend_from_slice(&[m[0][j], m[1][j], m[2][j]]);
        }
        Tensor::matrix(self.weights.len() + 4, 3, data).expect("coefficient layout")
    }

    pub fn control_tensor(&self) -> Tensor {
        points_tensor(&self.control)
    }

    fn from_solution(control: &[Point3], x: &[f64]) -> Self {
        let n = control.len();
        let weights = (0..n)
            .map(|a| [x[a * 3], x[a * 3 + 1], x[a * 3 + 2]])
            .collect();
        let c = |r: usize, col: usize| x[(n + r) * 3 + col];
        let mut m = [[0.0; 4]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            row[3] = c(0, i);
            for j in 0..3 {
                row[j] = c(1 + j, i);
            }
        }
        Self {
            affine: Affine3 { m },
            weights,
            control: control.to_vec(),
        }
    }

    /// Text form: a header line, the 3x4 affine row-major, then the control
    /// points and the warp coefficients, one row of three numbers per line.
    pub fn to_text(&self) -> String {
        let mut s = String::from("tps 1\naffine\n");
        for row in &self.affine.m {
            let _ = writeln!(s, "{} {} {} {}", row[0], row[1], row[2], row[3]);
        }
        let _ = writeln!(s, "controls {}", self.control.len());
        for c in &self.control {
            let _ = writeln!(s, "{} {} {}", c.x, c.y, c.z);
        }
        s.push_str("weights\n");
        for w in &self.weights {
            let _ = writeln!(s, "{} {} {}", w[0], w[1], w[2]);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, RegistrationError> {
        let bad = |line: usize, msg: &str| RegistrationError::TransformParse {
            line,
            message: msg.to_string(),
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| bad(0, &format!("missing {what}")))
        };
        let nums = |line: usize, l: &str, n: usize| -> Result<Vec<f64>, RegistrationError> {
            let v: Vec<f64> = l
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| bad(line, "expected numbers"))?;
            if v.len() != n {
                return Err(bad(line, &format!("expected {n} numbers")));
            }
            Ok(v)
        };
        let (l, h) = next("header")?;
        if h != "tps 1" {
            return Err(bad(l, "expected `tps 1` header"));
        }
        let (l, h) = next("affine")?;
        if h != "affine" {
            return Err(bad(l, "expected `affine`"));
        }
        let mut m = [[0.0; 4]; 3];
        for row in &mut m {
            let (l, t) = next("affine row")?;
            row.copy_from_slice(&nums(l, t, 4)?);
        }
        let (l, h) = next("controls")?;
        let count: usize = h
            .strip_prefix("controls ")
            .and_then(|c| c.trim().parse().ok())
            .ok_or_else(|| bad(l, "expected `controls <count>`"))?;
        let mut control = Vec::with_capacity(count);
        for _ in 0..count {
            let (l, t) = next("control point")?;
            control.push(Point3::from_slice(&nums(l, t, 3)?));
        }
        let (l, h) = next("weights")?;
        if h != "weights" {
            return Err(bad(l, "expected `weights`"));
        }
        let mut weights = Vec::with_capacity(count);
        for _ in 0..count {
            let (l, t) = next("weight row")?;
            let v = nums(l, t, 3)?;
            weights.push([v[0], v[1], v[2]]);
        }
        Ok(Self {
            affine: Affine3 { m },
            weights,
            control,
        })
    }
}

pub(crate) fn points_tensor(points: &[Point3]) -> Tensor {
    let data = points.iter().flat_map(|p| p.to_array()).collect();
    Tensor::matrix(points.len(), 3, data).expect("3 columns")
}

pub(crate) fn tensor_points(t: &Tensor) -> Vec<Point3> {
    t.data().chunks(3).map(Point3::from_slice).collect()
}

/// Fits the TPS mapping `source[a]` to `target[a]` with smoothing `lambda`.
pub fn fit_tps(
    source: &[Point3],
    target: &[Point3],
    lambda: f64,
) -> Result<TpsTransform, RegistrationError> {
    let n = source.len();
    if n != target.len() {
        return Err(RegistrationError::KeypointCountMismatch(n, target.len()));
    }
    if n < 4 {
        return Err(RegistrationError::TooFewControls(n));
    }
    if !(lambda >= 0.0) {
        return Err(RegistrationError::BadLambda(lambda));
    }
    let dim = n + 4;
    let mut l = vec![0.0; dim * dim];
    for a in 0..n {
        for b in 0..n {
            l[a * dim + b] = tps_kernel((source[a] - source[b]).norm_squared());
        }
        l[a * dim + a] += lambda;
        let p = [1.0, source[a].x, source[a].y, source[a].z];
        for (j, v) in p.iter().enumerate() {
            l[a * dim + n + j] = *v;
            l[(n + j) * dim + a] = *v;
        }
    }
    let mut rhs = vec![0.0; dim * 3];
    for (a, t) in target.iter().enumerate() {
        rhs[a * 3..a * 3 + 3].copy_from_slice(&t.to_array());
    }
    let lu = Lu::factor(dim, &l).map_err(|_| RegistrationError::Singular { lambda })?;
    let x = lu.solve(&rhs, 3);
    let t = TpsTransform::from_solution(source, &x);
    if !t.is_finite() {
        return Err(RegistrationError::Singular { lambda });
    }
    Ok(t)
}

pub fn apply_tps(t: &TpsTransform, tractogram: &Tractogram) -> Result<Tractogram, GeometryError> {
    if !t.is_finite() {
        return Err(GeometryError::NonFinite);
    }
    tractogram.map_points(|p| t.apply(p))
}

/// A TPS whose coefficients live on a tape.
#[derive(Clone, Copy, Debug)]
pub struct TpsVars {
    /// `[A + 4, 3]`: warp rows then affine rows, as in [`TpsTransform::coefficient_tensor`].
    pub coefficients: Var,
    /// `[A, 3]` control points.
    pub control: Var,
    pub n_control: usize,
}

impl TpsVars {
    pub fn constant(tape: &mut Tape, t: &TpsTransform) -> Self {
        Self {
            coefficients: tape.constant(t.coefficient_tensor()),
            control: tape.constant(t.control_tensor()),
            n_control: t.control.len(),
        }
    }

    /// Reads the fitted transform back from tape values.
    pub fn to_transform(&self, tape: &Tape) -> TpsTransform {
        let control = tensor_points(tape.value(self.control));
        TpsTransform::from_solution(&control, tape.value(self.coefficients).data())
    }
}

/// Differentiable TPS fit; `source` and `target` are `[A, 3]`.
pub fn fit_tps_var(
    tape: &mut Tape,
    source: Var,
    target: Var,
    lambda: f64,
) -> Result<TpsVars, RegistrationError> {
    let n = tape.shape(source)[0];
    if tape.shape(target) != tape.shape(source) {
        return Err(RegistrationError::KeypointCountMismatch(
            n,
            tape.shape(target)[0],
        ));
    }
    if n < 4 {
        return Err(RegistrationError::TooFewControls(n));
    }
    let sq = tape.pairwise_sq_dist(source, source)?;
    let k = tape.tps_kernel(sq);
    let mut reg = Tensor::zeros(&[n, n]);
    for a in 0..n {
        reg.data_mut()[a * n + a] = lambda;
    }
    let reg = tape.constant(reg);
    let k = tape.add(k, reg)?;
    let ones = tape.constant(Tensor::full(&[n, 1], 1.0));
    let p = tape.concat(&[ones, source], 1)?;
    let pt = tape.transpose(p)?;
    let z44 = tape.constant(Tensor::zeros(&[4, 4]));
    let top = tape.concat(&[k, p], 1)?;
    let bottom = tape.concat(&[pt, z44], 1)?;
    let lhs = tape.concat(&[top, bottom], 0)?;
    let z43 = tape.constant(Tensor::zeros(&[4, 3]));
    let rhs = tape.concat(&[target, z43], 0)?;
    let coefficients = tape.solve(lhs, rhs).map_err(|e| match e {
        TensorError::Singular { .. } => RegistrationError::Singular { lambda },
        other => other.into(),
    })?;
    Ok(TpsVars {
        coefficients,
        control: source,
        n_control: n,
    })
}

/// Applies a tape TPS to `points` (`[M, 3]`).
pub fn apply_tps_var(tape: &mut Tape, tps: &TpsVars, points: Var) -> Result<Var, TensorError> {
    let m = tape.shape(points)[0];
    let n = tps.n_control;
    let warp_rows: Vec<usize> = (0..n).collect();
    let affine_rows: Vec<usize> = (n..n + 4).collect();
    let w = tape.gather(tps.coefficients, &warp_rows)?;
    let c = tape.gather(tps.coefficients, &affine_rows)?;
    let ones = tape.constant(Tensor::full(&[m, 1], 1.0));
    let hom = tape.concat(&[ones, points], 1)?;
    let lin = tape.matmul(hom, c)?;
    if n == 0 {
        return Ok(lin);
    }
    let sq = tape.pairwise_sq_dist(points, tps.control)?;
    let u = tape.tps_kernel(sq);
    let warp = tape.matmul(u, w)?;
    tape.add(lin, warp)
}

/// Applies a constant affine map to tape points (`[M, 3]`).
pub fn apply_affine_var(
    tape: &mut Tape,
    affine: &Affine3,
    points: Var,
) -> Result<Var, TensorError> {
    let m = tape.shape(points)[0];
    let t = TpsTransform::from_affine(*affine).coefficient_tensor();
    let c = tape.constant(t);
    let ones = tape.constant(Tensor::full(&[m, 1], 1.0));
    let hom = tape.concat(&[ones, points], 1)?;
    tape.matmul(hom, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<Point3> {
        (0..n)
            .map(|_| {
                Point3::new(
                    rng.random_range(-scale..scale),
                    rng.random_range(-scale..scale),
                    rng.random_range(-scale..scale),
                )
            })
            .collect()
    }

    #[test]
    fn identity_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let src = random_points(&mut rng, 8, 10.0);
        let t = fit_tps(&src, &src, 0.0).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((t.affine.m[i][j] - e).abs() < 1e-9);
            }
        }
        assert!(t.warp_norm() < 1e-9);
    }

    #[test]
    fn translation_is_reproduced_by_affine_part() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let src = random_points(&mut rng, 8, 10.0);
        let shift = Point3::new(1.0, -2.0, 0.5);
        let dst: Vec<_> = src.iter().map(|&p| p + shift).collect();
        let t = fit_tps(&src, &dst, 0.0).unwrap();
        assert!(t.warp_norm() < 1e-8);
        assert!((t.affine.m[1][3] + 2.0).abs() < 1e-8);
    }

    #[test]
    fn interpolates_controls_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let src = random_points(&mut rng, 10, 20.0);
        let dst: Vec<_> = src
            .iter()
            .map(|&p| {
                p + Point3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    0.3,
                )
            })
            .collect();
        let t = fit_tps(&src, &dst, 0.0).unwrap();
        for (s, d) in src.iter().zip(&dst) {
            assert!(t.apply(*s).distance(*d) < 1e-8);
        }
        // side conditions
        let mut sum = [0.0; 3];
        let mut moment = [[0.0; 3]; 3];
        for (w, c) in t.weights.iter().zip(&t.control) {
            for i in 0..3 {
                sum[i] += w[i];
                for (j, cv) in c.to_array().iter().enumerate() {
                    moment[i][j] += w[i] * cv;
                }
            }
        }
        assert!(sum.iter().all(|v| v.abs() < 1e-8));
        assert!(moment.iter().flatten().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn coplanar_controls_without_smoothing_are_singular() {
        let src: Vec<_> = (0..6)
            .map(|i| Point3::new(i as f64, (i * i) as f64, 0.0))
            .collect();
        assert!(matches!(
            fit_tps(&src, &src, 0.0),
            Err(RegistrationError::Singular { .. })
        ));
        assert!(matches!(
            fit_tps(&src[..3], &src[..3], 0.0),
            Err(RegistrationError::TooFewControls(3))
        ));
    }

    #[test]
    fn tape_fit_matches_plain_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let src = random_points(&mut rng, 7, 10.0);
        let dst = random_points(&mut rng, 7, 10.0);
        let plain = fit_tps(&src, &dst, 1e-3).unwrap();
        let mut tape = Tape::new();
        let s = tape.constant(points_tensor(&src));
        let d = tape.constant(points_tensor(&dst));
        let vars = fit_tps_var(&mut tape, s, d, 1e-3).unwrap();
        let probe = random_points(&mut rng, 5, 12.0);
        let pv = tape.constant(points_tensor(&probe));
        let out = apply_tps_var(&mut tape, &vars, pv).unwrap();
        for (p, q) in probe.iter().zip(tensor_points(tape.value(out))) {
            assert!(plain.apply(*p).distance(q) < 1e-9);
        }
        let back = vars.to_transform(&tape);
        assert!(back.apply(probe[0]).distance(plain.apply(probe[0])) < 1e-9);
    }

    #[test]
    fn text_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let src = random_points(&mut rng, 5, 10.0);
        let dst = random_points(&mut rng, 5, 10.0);
        let t = fit_tps(&src, &dst, 0.0).unwrap();
        assert_eq!(TpsTransform::from_text(&t.to_text()).unwrap(), t);
        assert!(TpsTransform::from_text("tps 2\n").is_err());
    }
}
