use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tractjoint::geometry::{Affine3, Point3};
use tractjoint::io::synth::{
    euler_rotation, generate_synthetic, sample_deformation, DeformationSpec, SyntheticSpec,
};
use tractjoint::metrics::abd;
use tractjoint::registration::tps::{apply_tps, fit_tps};
use tractjoint::registration::RegistrationError;

fn random_points(rng: &mut ChaCha8Rng, n: usize, spread: f64) -> Vec<Point3> {
    (0..n)
        .map(|_| {
            Point3::new(
                rng.random_range(-spread..spread),
                rng.random_range(-spread..spread),
                rng.random_range(-spread..spread),
            )
        })
        .collect()
}

#[test]
fn interpolation_is_exact_for_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let source = random_points(&mut rng, 10, 40.0);
        let target: Vec<Point3> = source
            .iter()
            .map(|&p| p + random_points(&mut rng, 1, 5.0)[0])
            .collect();
        let t = fit_tps(&source, &target, 0.0).unwrap();
        let residual = source
            .iter()
            .zip(&target)
            .map(|(&s, &g)| t.apply(s).distance(g))
            .fold(0.0, f64::max);
        assert!(residual < 1e-8, "residual {residual}");
    }
}

#[test]
fn affine_targets_need_no_warp() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let source = random_points(&mut rng, 10, 40.0);
        let rot = euler_rotation(
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
        );
        let mut lin = rot;
        for row in &mut lin {
            for v in row.iter_mut() {
                *v *= rng.random_range(0.9..1.1);
            }
        }
        let g = Affine3::from_linear(lin, random_points(&mut rng, 1, 10.0)[0]);
        let target: Vec<Point3> = source.iter().map(|&p| g.apply(p)).collect();
        let t = fit_tps(&source, &target, 0.0).unwrap();
        assert!(t.warp_norm() < 1e-6, "warp norm {}", t.warp_norm());
        let probe = random_points(&mut rng, 5, 40.0);
        for p in probe {
            assert!(t.apply(p).distance(g.apply(p)) < 1e-6);
        }
    }
}

#[test]
fn coplanar_controls_are_rejected() {
    let source: Vec<Point3> = (0..6)
        .map(|i| Point3::new(i as f64, (i * i) as f64, 0.0))
        .collect();
    let target = source.clone();
    assert!(matches!(
        fit_tps(&source, &target, 0.0),
        Err(RegistrationError::Singular { .. })
    ));
}

#[test]
fn too_few_controls() {
    let p = vec![Point3::default(); 3];
    assert!(matches!(
        fit_tps(&p, &p, 0.0),
        Err(RegistrationError::TooFewControls(3))
    ));
}

#[test]
fn warp_then_numeric_unwarp_recovers_original() {
    let (t, _) = generate_synthetic(&SyntheticSpec {
        streamlines_per_bundle: 20,
        ..Default::default()
    })
    .unwrap();
    for (amplitude, tol) in [(0.5, 0.05), (2.0, 0.2)] {
        let def = sample_deformation(&DeformationSpec {
            affine_scale_range: 0.0,
            rotation_range: 0.0,
            translation_range: 0.0,
            nonlinear_amplitude: amplitude,
            seed: 5,
            ..Default::default()
        })
        .unwrap();
        let warped = def.apply(&t).unwrap();
        // Reverse TPS fitted on warped/original pairs from a regular grid.
        let mut from = Vec::new();
        let mut to = Vec::new();
        let g = 7;
        for i in 0..g {
            for j in 0..g {
                for k in 0..g {
                    let c = |n: usize| -60.0 + 120.0 * n as f64 / (g - 1) as f64;
                    let p = Point3::new(c(i), c(j), c(k));
                    from.push(def.apply_point(p));
                    to.push(p);
                }
            }
        }
        let inverse = fit_tps(&from, &to, 0.0).unwrap();
        let back = apply_tps(&inverse, &warped).unwrap();
        let worst = t
            .points()
            .zip(back.points())
            .map(|(a, b)| a.distance(b))
            .fold(0.0, f64::max);
        assert!(worst < tol, "amplitude {amplitude}: worst {worst}");
        assert!(abd(&back, &t).unwrap() < abd(&warped, &t).unwrap());
    }
}

proptest! {
    #[test]
    fn smoothing_never_breaks_affine_reproduction(lambda in 0.0..10.0f64, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let source = random_points(&mut rng, 8, 30.0);
        let shift = Point3::new(1.0, -2.0, 3.0);
        let target: Vec<Point3> = source.iter().map(|&p| p + shift).collect();
        let t = fit_tps(&source, &target, lambda).unwrap();
        for &s in &source {
            prop_assert!(t.apply(s).distance(s + shift) < 1e-6);
        }
    }

    #[test]
    fn transform_text_round_trips(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let source = random_points(&mut rng, 6, 30.0);
        let target = random_points(&mut rng, 6, 30.0);
        let t = fit_tps(&source, &target, 0.1).unwrap();
        let back = tractjoint::registration::tps::TpsTransform::from_text(&t.to_text()).unwrap();
        prop_assert_eq!(back, t);
    }
}
