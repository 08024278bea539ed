use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use tractjoint::clustering::{
    hard_assign, kl_loss, kl_loss_var, kmeans_init, soft_assign, soft_assign_var,
    target_distribution, ClusteringError, SoftAssignments,
};
use tractjoint_autodiff::{Tape, Tensor};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-5.0..5.0f64, rows * cols)
        .prop_map(move |v| Tensor::new(vec![rows, cols], v).unwrap())
}

fn stochastic_rows(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(0.01..1.0f64, rows * cols).prop_map(move |mut v| {
        for r in v.chunks_mut(cols) {
            let s: f64 = r.iter().sum();
            r.iter_mut().for_each(|x| *x /= s);
        }
        Tensor::new(vec![rows, cols], v).unwrap()
    })
}

#[test]
fn student_t_example() {
    let z = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
    let mu = Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
    let q = soft_assign(&z, &mu).unwrap();
    assert!((q.0.row(0)[0] - 2.0 / 3.0).abs() < 1e-12);
    assert!((q.0.row(0)[1] - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn sharpening_example() {
    // Two rows give unit cluster masses for the first row's (0.8, 0.2).
    let q = SoftAssignments(Tensor::new(vec![2, 2], vec![0.8, 0.2, 0.2, 0.8]).unwrap());
    let p = target_distribution(&q);
    assert!((p.p.row(0)[0] - 16.0 / 17.0).abs() < 1e-12);
    assert!((p.p.row(0)[1] - 1.0 / 17.0).abs() < 1e-12);
    assert_eq!(p.dead_clusters, 0);
}

#[test]
fn binary_kl_example() {
    let p = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
    let q = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
    assert!((kl_loss(&p, &q).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    assert_eq!(kl_loss(&q, &q).unwrap(), 0.0);
}

#[test]
fn kl_rejects_zero_q() {
    let p = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
    let q = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
    assert!(matches!(
        kl_loss(&p, &q),
        Err(ClusteringError::NonPositive { row: 0, col: 1 })
    ));
}

#[test]
fn kmeans_recovers_blob_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let noise = Normal::new(0.0, 0.5).unwrap();
    let n = 200;
    let mut data = Vec::new();
    for i in 0..2 * n {
        let c = if i < n { -10.0 } else { 10.0 };
        data.push(c + noise.sample(&mut rng));
        data.push(noise.sample(&mut rng));
    }
    let z = Tensor::new(vec![2 * n, 2], data).unwrap();
    let mu = kmeans_init(&z, 2, 1, 100).unwrap();
    let bound = 3.0 * 0.5 / (n as f64).sqrt();
    let mut xs = [mu.row(0)[0], mu.row(1)[0]];
    xs.sort_by(f64::total_cmp);
    assert!((xs[0] + 10.0).abs() < bound);
    assert!((xs[1] - 10.0).abs() < bound);
}

#[test]
fn hard_assign_threshold() {
    let q = SoftAssignments(Tensor::new(vec![3, 2], vec![0.9, 0.1, 0.5, 0.5, 0.35, 0.65]).unwrap());
    assert_eq!(hard_assign(&q, 0.4), vec![0, 0, 1]);
    assert_eq!(hard_assign(&q, 0.0), vec![0, 0, 1]);
    assert_eq!(hard_assign(&q, 1.01), vec![-1, -1, -1]);
    assert_eq!(hard_assign(&q, 0.7), vec![0, -1, -1]);
}

proptest! {
    #[test]
    fn soft_assign_rows_normalize(z in matrix(6, 3), mu in matrix(4, 3)) {
        let q = soft_assign(&z, &mu).unwrap();
        for i in 0..6 {
            let s: f64 = q.0.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(q.0.row(i).iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn soft_assign_matches_tape(z in matrix(5, 3), mu in matrix(3, 3)) {
        let q = soft_assign(&z, &mu).unwrap();
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let mv = tape.constant(mu.clone());
        let qv = soft_assign_var(&mut tape, zv, mv).unwrap();
        for (a, b) in q.0.data().iter().zip(tape.value(qv).data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn target_rows_normalize(q in stochastic_rows(7, 4)) {
        let p = target_distribution(&SoftAssignments(q));
        for i in 0..7 {
            let s: f64 = p.p.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn target_matches_formula(q in stochastic_rows(5, 3)) {
        let p = target_distribution(&SoftAssignments(q.clone()));
        let mass: Vec<f64> = (0..3).map(|j| (0..5).map(|i| q.row(i)[j]).sum()).collect();
        for i in 0..5 {
            let raw: Vec<f64> = (0..3).map(|j| q.row(i)[j].powi(2) / mass[j]).collect();
            let s: f64 = raw.iter().sum();
            for j in 0..3 {
                prop_assert!((p.p.row(i)[j] - raw[j] / s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kl_matches_double_loop(p in stochastic_rows(6, 4), q in stochastic_rows(6, 4)) {
        let mut oracle = 0.0;
        for i in 0..6 {
            for j in 0..4 {
                let a = p.row(i)[j];
                if a > 0.0 {
                    oracle += a * (a / q.row(i)[j]).ln();
                }
            }
        }
        let k = kl_loss(&p, &q).unwrap();
        prop_assert!((k - oracle).abs() < 1e-12);
        prop_assert!(k >= -1e-15);
        let mut tape = Tape::new();
        let qv = tape.constant(q.clone());
        let kv = kl_loss_var(&mut tape, &p, qv).unwrap();
        prop_assert!((tape.scalar_value(kv) - oracle).abs() < 1e-12);
    }
}
