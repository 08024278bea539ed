use tractjoint::geometry::{Affine3, Point3, Tractogram};
use tractjoint::io::config::{Config, Preset};
use tractjoint::io::synth::{
    euler_rotation, generate_synthetic, sample_deformation, DeformationSpec, SyntheticSpec,
};
use tractjoint::registration::equivariance_loss_var;
use tractjoint::registration::keypoints::keypoints_from_logits_var;
use tractjoint::registration::tps::TpsTransform;
use tractjoint::registration::Deformation;
use tractjoint::training::{
    init_joint, joint_train_until, pretrain, pretrain_until, JointVariant, TrainState,
};
use tractjoint_autodiff::checkpoint::{decode_checkpoint, encode_checkpoint};
use tractjoint_autodiff::{Tape, Tensor};

fn small_config() -> Config {
    let mut cfg = Config::preset(Preset::Desk);
    cfg.keypoints = 6;
    cfg.clusters = 2;
    cfg.batch_size = 8;
    cfg.pretrain_epochs = 4;
    cfg.joint_epochs = 2;
    cfg.seed = 5;
    cfg
}

fn small_data() -> Vec<Tractogram> {
    let (t, _) = generate_synthetic(&SyntheticSpec {
        bundle_count: 2,
        streamlines_per_bundle: 6,
        seed: 1,
        ..Default::default()
    })
    .unwrap();
    let def = sample_deformation(&DeformationSpec {
        seed: 2,
        ..Default::default()
    })
    .unwrap();
    let s = def.apply(&t).unwrap();
    vec![t, s]
}

fn via_checkpoint(state: &TrainState) -> TrainState {
    let bytes = encode_checkpoint(&state.to_records());
    TrainState::from_records(&decode_checkpoint(&bytes).unwrap()).unwrap()
}

#[test]
fn zero_epochs_leave_the_initialization() {
    let mut cfg = small_config();
    cfg.pretrain_epochs = 0;
    let (state, report) = pretrain(&small_data(), &cfg).unwrap();
    assert_eq!(state, TrainState::init(&cfg));
    assert!(report.records.is_empty());
}

#[test]
fn seeded_runs_are_identical() {
    let cfg = small_config();
    let data = small_data();
    let (a, ra) = pretrain(&data, &cfg).unwrap();
    let (b, rb) = pretrain(&data, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    let mut other = cfg.clone();
    other.seed += 1;
    let (c, _) = pretrain(&data, &other).unwrap();
    assert_ne!(a.model, c.model);
}

#[test]
fn pretraining_resumes_bit_identically() {
    let cfg = small_config();
    let data = small_data();
    let mut straight = TrainState::init(&cfg);
    let full = pretrain_until(&mut straight, &data, &cfg, 4).unwrap();

    let mut first = TrainState::init(&cfg);
    let mut log = pretrain_until(&mut first, &data, &cfg, 2).unwrap();
    let mut resumed = via_checkpoint(&first);
    assert_eq!(resumed, first);
    log.extend(pretrain_until(&mut resumed, &data, &cfg, 4).unwrap());
    assert_eq!(resumed, straight);
    assert_eq!(log, full);
}

#[test]
fn joint_training_resumes_bit_identically() {
    let cfg = small_config();
    let data = small_data();
    let (pre, _) = pretrain(&data, &cfg).unwrap();

    let mut straight = pre.clone();
    let full = joint_train_until(&mut straight, &data, &cfg, JointVariant::Joint, 2).unwrap();

    let mut first = pre;
    let mut log = joint_train_until(&mut first, &data, &cfg, JointVariant::Joint, 1).unwrap();
    let mut resumed = via_checkpoint(&first);
    log.extend(joint_train_until(&mut resumed, &data, &cfg, JointVariant::Joint, 2).unwrap());
    assert_eq!(resumed, straight);
    assert_eq!(log, full);
}

#[test]
fn zero_joint_epochs_only_add_centroids() {
    let cfg = small_config();
    let data = small_data();
    let (pre, _) = pretrain(&data, &cfg).unwrap();
    let mut state = pre.clone();
    joint_train_until(&mut state, &data, &cfg, JointVariant::Joint, 0).unwrap();
    assert_eq!(state.model.embedding, pre.model.embedding);
    assert_eq!(state.model.head, pre.model.head);
    let mu = state.model.centroids.as_ref().unwrap();
    assert_eq!(mu.shape(), &[2, 128]);
    // A second initialization keeps the existing centroids.
    let before = state.clone();
    init_joint(&mut state, &data, &cfg).unwrap();
    assert_eq!(state, before);
}

#[test]
fn every_variant_trains_with_finite_losses() {
    let cfg = small_config();
    let data = small_data();
    let (pre, _) = pretrain(&data, &cfg).unwrap();
    for variant in [
        JointVariant::Joint,
        JointVariant::RegistrationOnly,
        JointVariant::ClusteringOnly,
    ] {
        let mut state = pre.clone();
        let report = joint_train_until(&mut state, &data, &cfg, variant, 1).unwrap();
        let total = report.series("joint.total");
        assert_eq!(total.len(), 1);
        assert!(total[0].is_finite() && total[0] >= 0.0);
        // Dropped terms are absent from the log.
        assert_eq!(
            report.series("joint.registration").is_empty(),
            variant == JointVariant::ClusteringOnly
        );
        assert_eq!(
            report.series("joint.kl").is_empty(),
            variant == JointVariant::RegistrationOnly
        );
    }
}

#[test]
fn fixed_weights_commute_with_affine_maps() {
    // Keypoints are convex combinations, so with weights that ignore the
    // coordinates the equivariance loss under a pure affine map is zero.
    let (t, _) = generate_synthetic(&SyntheticSpec {
        bundle_count: 1,
        streamlines_per_bundle: 3,
        ..Default::default()
    })
    .unwrap();
    let g = Affine3::from_linear(euler_rotation(0.1, -0.2, 0.3), Point3::new(4.0, 5.0, -6.0));
    let def = Deformation {
        affine: g,
        warp: TpsTransform::identity(),
    };
    let moved = def.apply(&t).unwrap();
    let flat = |t: &Tractogram| Tensor::new(vec![t.points().count(), 3], t.flat_coords()).unwrap();
    let n = t.points().count();
    let logits: Vec<f64> = (0..n * 5).map(|i| ((i * 37) % 11) as f64 * 0.3).collect();
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::new(vec![n, 5], logits).unwrap());
    let c0 = tape.constant(flat(&t));
    let c1 = tape.constant(flat(&moved));
    let (_, k0) = keypoints_from_logits_var(&mut tape, l, c0).unwrap();
    let (_, k1) = keypoints_from_logits_var(&mut tape, l, c1).unwrap();
    let loss = equivariance_loss_var(&mut tape, k1, k0, &def).unwrap();
    assert!(tape.scalar_value(loss) < 1e-20);
}
