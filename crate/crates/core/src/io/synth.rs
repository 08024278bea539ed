//! Seeded synthetic bundles and random augmentation transforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::geometry::{
    resample_streamline, Affine3, GeometryError, Point3, Streamline, Tractogram,
};
use crate::registration::tps::{fit_tps, TpsTransform};
use crate::registration::{Deformation, RegistrationError};

/// Points used to trace a curve before resampling to the output point count.
const DENSE_POINTS: usize = 64;
/// Sinusoid frequencies of the smooth jitter field.
const JITTER_MODES: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub bundle_count: usize,
    pub streamlines_per_bundle: usize,
    /// One skeleton polyline per bundle. Empty means procedural prototypes.
    pub prototype_control_points: Vec<Vec<Point3>>,
    /// Standard deviation of the jitter, in mm.
    pub jitter_sigma: f64,
    pub n_points: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            bundle_count: 4,
            streamlines_per_bundle: 100,
            prototype_control_points: Vec::new(),
            jitter_sigma: 2.0,
            n_points: 14,
            seed: 0,
        }
    }
}

/// Bundle skeletons arranged around a ring: bundle `b` is a 50 mm arc tangent
/// to a 35 mm circle, bulging out of the ring plane with alternating sign.
pub fn procedural_prototypes(bundle_count: usize) -> Vec<Vec<Point3>> {
    const RADIUS: f64 = 35.0;
    const LENGTH: f64 = 50.0;
    const BULGE: f64 = 8.0;
    const LIFT: f64 = 10.0;
    (0..bundle_count)
        .map(|b| {
            let theta = std::f64::consts::TAU * b as f64 / bundle_count as f64;
            let (s, c) = theta.sin_cos();
            let radial = Point3::new(c, s, 0.0);
            let tangent = Point3::new(-s, c, 0.0);
            let sign = if b % 2 == 0 { 1.0 } else { -1.0 };
            let center = radial * RADIUS + Point3::new(0.0, 0.0, sign * LIFT);
            (0..DENSE_POINTS)
                .map(|k| {
                    let u = k as f64 / (DENSE_POINTS - 1) as f64;
                    let arch = (std::f64::consts::PI * u).sin();
                    center
                        + tangent * ((u - 0.5) * LENGTH)
                        + radial * (0.5 * BULGE * arch)
                        + Point3::new(0.0, 0.0, sign * BULGE * arch)
                })
                .collect()
        })
        .collect()
}

/// Returns the tractogram (labelled by bundle) and the ground-truth labels.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Tractogram, Vec<i64>), GeometryError> {
    if spec.bundle_count == 0 {
        return Err(GeometryError::EmptyTractogram);
    }
    if !(spec.jitter_sigma >= 0.0 && spec.jitter_sigma.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    let prototypes = if spec.prototype_control_points.is_empty() {
        procedural_prototypes(spec.bundle_count)
    } else {
        if spec.prototype_control_points.len() != spec.bundle_count {
            return Err(GeometryError::LabelCount {
                labels: spec.prototype_control_points.len(),
                streamlines: spec.bundle_count,
            });
        }
        spec.prototype_control_points.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut streamlines = Vec::with_capacity(spec.bundle_count * spec.streamlines_per_bundle);
    let mut labels = Vec::with_capacity(streamlines.capacity());
    for (b, proto) in prototypes.iter().enumerate() {
        let dense = resample_streamline(&Streamline::new(proto.clone())?, DENSE_POINTS)?;
        for _ in 0..spec.streamlines_per_bundle {
            let mut gauss = || {
                Point3::new(
                    normal.sample(&mut rng),
                    normal.sample(&mut rng),
                    normal.sample(&mut rng),
                ) * spec.jitter_sigma
            };
            // Constant offset plus a few low-frequency sinusoids along the arc.
            let offset = gauss();
            let modes: Vec<(Point3, f64)> = (1..=JITTER_MODES)
                .map(|f| (gauss() * (0.5 / f as f64), f as f64))
                .collect();
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let pts = dense
                .points()
                .iter()
                .enumerate()
                .map(|(k, p)| {
                    let u = k as f64 / (DENSE_POINTS - 1) as f64;
                    let mut q = *p + offset;
                    for (amp, f) in &modes {
                        q = q + *amp * (std::f64::consts::PI * f * u + phase).sin();
                    }
                    q
                })
                .collect();
            streamlines.push(resample_streamline(&Streamline::new(pts)?, spec.n_points)?);
            labels.push(b as i64);
        }
    }
    let t = Tractogram::with_labels(streamlines, labels.clone())?;
    Ok((t, labels))
}

/// Ranges for random augmentation transforms.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationSpec {
    /// Per-axis scale factors are drawn from `1 ± affine_scale_range`.
    pub affine_scale_range: f64,
    /// Each Euler angle is drawn from `± rotation_range` degrees.
    pub rotation_range: f64,
    /// Each translation component is drawn from `± translation_range` mm.
    pub translation_range: f64,
    /// Standard deviation of the control-point displacements, in mm.
    pub nonlinear_amplitude: f64,
    /// Control points per axis of the warp grid.
    pub nonlinear_control_grid: usize,
    /// Half-width of the cube (centred at the origin) spanned by the grid.
    pub domain: f64,
    pub seed: u64,
}

impl Default for DeformationSpec {
    fn default() -> Self {
        Self {
            affine_scale_range: 0.05,
            rotation_range: 8.0,
            translation_range: 6.0,
            nonlinear_amplitude: 2.0,
            nonlinear_control_grid: 3,
            domain: 60.0,
            seed: 0,
        }
    }
}

fn symmetric(rng: &mut ChaCha8Rng, r: f64) -> f64 {
    if r > 0.0 {
        rng.random_range(-r..=r)
    } else {
        0.0
    }
}

/// `Rz(γ) Ry(β) Rx(α)`.
pub fn euler_rotation(alpha: f64, beta: f64, gamma: f64) -> [[f64; 3]; 3] {
    let (sa, ca) = alpha.sin_cos();
    let (sb, cb) = beta.sin_cos();
    let (sg, cg) = gamma.sin_cos();
    [
        [cg * cb, cg * sb * sa - sg * ca, cg * sb * ca + sg * sa],
        [sg * cb, sg * sb * sa + cg * ca, sg * sb * ca - cg * sa],
        [-sb, cb * sa, cb * ca],
    ]
}

/// Draws the affine `G` and the TPS warp `Φ`; data is mapped by `G ∘ Φ`.
pub fn sample_deformation(spec: &DeformationSpec) -> Result<Deformation, RegistrationError> {
    let ranges = [
        spec.affine_scale_range,
        spec.rotation_range,
        spec.translation_range,
        spec.nonlinear_amplitude,
        spec.domain,
    ];
    if ranges.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(RegistrationError::BadRange);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scale: Vec<f64> = (0..3)
        .map(|_| 1.0 + symmetric(&mut rng, spec.affine_scale_range))
        .collect();
    let angles: Vec<f64> = (0..3)
        .map(|_| symmetric(&mut rng, spec.rotation_range).to_radians())
        .collect();
    let t = Point3::new(
        symmetric(&mut rng, spec.translation_range),
        symmetric(&mut rng, spec.translation_range),
        symmetric(&mut rng, spec.translation_range),
    );
    let rot = euler_rotation(angles[0], angles[1], angles[2]);
    let mut lin = rot;
    for row in &mut lin {
        for (c, s) in row.iter_mut().zip(&scale) {
            *c *= s;
        }
    }
    let affine = Affine3::from_linear(lin, t);

    let warp = if spec.nonlinear_amplitude > 0.0 {
        let g = spec.nonlinear_control_grid.max(2);
        let step = 2.0 * spec.domain / (g - 1) as f64;
        let normal = Normal::new(0.0, spec.nonlinear_amplitude).unwrap();
        let mut control = Vec::with_capacity(g * g * g);
        let mut moved = Vec::with_capacity(g * g * g);
        for i in 0..g {
            for j in 0..g {
                for k in 0..g {
                    let c = Point3::new(
                        -spec.domain + i as f64 * step,
                        -spec.domain + j as f64 * step,
                        -spec.domain + k as f64 * step,
                    );
                    let d = Point3::new(
                        normal.sample(&mut rng),
                        normal.sample(&mut rng),
                        normal.sample(&mut rng),
                    );
                    control.push(c);
                    moved.push(c + d);
                }
            }
        }
        fit_tps(&control, &moved, 0.0)?
    } else {
        TpsTransform::identity()
    };
    Ok(Deformation { affine, warp })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::pairwise_mdf;

    #[test]
    fn zero_jitter_reproduces_prototype() {
        let spec = SyntheticSpec {
            bundle_count: 1,
            streamlines_per_bundle: 3,
            jitter_sigma: 0.0,
            ..Default::default()
        };
        let (t, labels) = generate_synthetic(&spec).unwrap();
        assert_eq!(labels, vec![0, 0, 0]);
        let proto = Streamline::new(procedural_prototypes(1)[0].clone()).unwrap();
        let proto =
            resample_streamline(&resample_streamline(&proto, DENSE_POINTS).unwrap(), 14).unwrap();
        for s in t.streamlines() {
            assert_eq!(s, &proto);
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let spec = SyntheticSpec {
            seed: 9,
            streamlines_per_bundle: 5,
            ..Default::default()
        };
        assert_eq!(
            generate_synthetic(&spec).unwrap(),
            generate_synthetic(&spec).unwrap()
        );
    }

    #[test]
    fn separated_bundles_are_bimodal() {
        let spec = SyntheticSpec {
            bundle_count: 2,
            streamlines_per_bundle: 20,
            ..Default::default()
        };
        let (t, labels) = generate_synthetic(&spec).unwrap();
        let d = pairwise_mdf(&t).unwrap();
        let mut intra: f64 = 0.0;
        let mut inter = f64::INFINITY;
        for i in 0..t.len() {
            for j in 0..i {
                if labels[i] == labels[j] {
                    intra = intra.max(d.get(i, j));
                } else {
                    inter = inter.min(d.get(i, j));
                }
            }
        }
        assert!(intra < inter, "intra {intra} inter {inter}");
    }

    #[test]
    fn zero_spec_is_identity() {
        let spec = DeformationSpec {
            affine_scale_range: 0.0,
            rotation_range: 0.0,
            translation_range: 0.0,
            nonlinear_amplitude: 0.0,
            ..Default::default()
        };
        let d = sample_deformation(&spec).unwrap();
        let p = Point3::new(3.0, -7.0, 11.0);
        assert!(d.apply_point(p).distance(p) < 1e-12);
    }

    #[test]
    fn translation_only() {
        let spec = DeformationSpec {
            affine_scale_range: 0.0,
            rotation_range: 0.0,
            nonlinear_amplitude: 0.0,
            seed: 4,
            ..Default::default()
        };
        let d = sample_deformation(&spec).unwrap();
        assert_eq!(d.warp, TpsTransform::identity());
        assert_eq!(d.affine.linear(), Affine3::identity().linear());
        assert!(d.affine.m.iter().any(|r| r[3] != 0.0));
    }

    #[test]
    fn rotation_is_orthonormal() {
        let r = euler_rotation(0.3, -0.2, 1.1);
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }
}
