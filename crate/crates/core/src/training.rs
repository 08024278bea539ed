//! Self-supervised pretraining followed by joint registration and clustering.
//!
//! Every epoch draws its randomness from a generator seeded by
//! `(seed, phase, epoch)`, so a run resumed from a checkpoint continues
//! exactly as an uninterrupted one would.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tractjoint_autodiff::{
    adamw_step, lr_schedule, AdamWConfig, AdamWState, CheckpointError, Tape, Tensor, TensorError,
    Var,
};

use crate::clustering::{
    kl_loss, kl_loss_var, kmeans_init, soft_assign, soft_assign_var, target_distribution,
    ClusteringError, SoftAssignments,
};
use crate::embedding::{coords_tensor, EmbeddingError};
use crate::geometry::{pairwise_mdf, DistanceMatrix, GeometryError, Tractogram};
use crate::io::config::{Config, PretrainCombine};
use crate::io::synth::{sample_deformation, DeformationSpec};
use crate::model::{Model, ModelError, ModelVars};
use crate::registration::tps::{apply_tps_var, fit_tps_var};
use crate::registration::{
    diversity_delta, diversity_loss_var, equivariance_loss_var, registration_loss_var, Deformation,
    RegistrationError,
};

const PHASE_PRETRAIN: u64 = 1;
const PHASE_JOINT: u64 = 2;
const PHASE_KMEANS: u64 = 3;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training tractograms")]
    NoData,
    #[error("training tractogram {index} is empty")]
    EmptyTractogram { index: usize },
    #[error("training tractogram {index} is not resampled to {n_points} points")]
    NotResampled { index: usize, n_points: usize },
    #[error("non-finite {what} at {phase} epoch {epoch}; state kept at the last good step")]
    Diverged {
        phase: &'static str,
        epoch: usize,
        what: String,
    },
    #[error("joint training needs pretrained centroids or enough streamlines: {0}")]
    Clustering(#[from] ClusteringError),
    #[error(transparent)]
    Registration(#[from] RegistrationError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("bad training state record `{0}`")]
    BadState(String),
}

/// Which terms the joint phase optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JointVariant {
    /// Registration, clustering and metric alignment.
    Joint,
    /// Without the clustering term.
    RegistrationOnly,
    /// Without the registration term.
    ClusteringOnly,
}

impl JointVariant {
    fn uses_registration(self) -> bool {
        self != JointVariant::ClusteringOnly
    }

    fn uses_clustering(self) -> bool {
        self != JointVariant::RegistrationOnly
    }
}

/// One logged scalar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub loss_name: String,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub records: Vec<LossRecord>,
}

impl LossReport {
    pub fn push(&mut self, epoch: usize, name: &str, value: f64) {
        self.records.push(LossRecord {
            epoch,
            loss_name: name.to_string(),
            value,
        });
    }

    pub fn extend(&mut self, other: LossReport) {
        self.records.extend(other.records);
    }

    /// Values logged under `name`, in epoch order.
    pub fn series(&self, name: &str) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.loss_name == name)
            .map(|r| r.value)
            .collect()
    }

    /// One JSON object per line.
    pub fn to_ndjson(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("loss record serializes"));
            s.push('\n');
        }
        s
    }
}

/// Parameters, optimizer moments and progress counters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: AdamWState,
    pub seed: u64,
    pub pretrain_epoch: usize,
    pub joint_epoch: usize,
}

impl TrainState {
    pub fn init(cfg: &Config) -> Self {
        let model = Model::init(&cfg.model_config(), cfg.seed);
        let optimizer = fresh_optimizer(&model);
        Self {
            model,
            optimizer,
            seed: cfg.seed,
            pretrain_epoch: 0,
            joint_epoch: 0,
        }
    }

    pub fn to_records(&self) -> Vec<(String, Tensor)> {
        let mut r = self.model.to_records();
        let names: Vec<String> = self
            .model
            .named_tensors()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        for (name, m) in names.iter().zip(&self.optimizer.m) {
            r.push((format!("adam.m.{name}"), m.clone()));
        }
        for (name, v) in names.iter().zip(&self.optimizer.v) {
            r.push((format!("adam.v.{name}"), v.clone()));
        }
        r.push(("adam.t".into(), Tensor::scalar(self.optimizer.step as f64)));
        r.push((
            "state.seed".into(),
            Tensor::vector(vec![
                (self.seed >> 32) as f64,
                (self.seed & 0xffff_ffff) as f64,
            ]),
        ));
        r.push((
            "state.pretrain_epoch".into(),
            Tensor::scalar(self.pretrain_epoch as f64),
        ));
        r.push((
            "state.joint_epoch".into(),
            Tensor::scalar(self.joint_epoch as f64),
        ));
        r
    }

    pub fn from_records(records: &[(String, Tensor)]) -> Result<Self, TrainError> {
        let model = Model::from_records(records)?;
        let find = |name: &str| {
            records
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| TrainError::BadState(name.to_string()))
        };
        let count = |name: &str| -> Result<usize, TrainError> {
            let v = find(name)?
                .item()
                .ok_or_else(|| TrainError::BadState(name.to_string()))?;
            if v < 0.0 || v.fract() != 0.0 {
                return Err(TrainError::BadState(name.to_string()));
            }
            Ok(v as usize)
        };
        let names: Vec<(String, Vec<usize>)> = model
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, shape) in &names {
            for (prefix, out) in [("adam.m", &mut m), ("adam.v", &mut v)] {
                let key = format!("{prefix}.{name}");
                let t = find(&key)?;
                if t.shape() != shape.as_slice() {
                    return Err(TrainError::BadState(key));
                }
                out.push(t.clone());
            }
        }
        let seed = find("state.seed")?;
        if seed.shape() != [2] {
            return Err(TrainError::BadState("state.seed".into()));
        }
        let seed = ((seed.data()[0] as u64) << 32) | seed.data()[1] as u64;
        Ok(Self {
            model,
            optimizer: AdamWState {
                step: count("adam.t")? as u64,
                m,
                v,
            },
            seed,
            pretrain_epoch: count("state.pretrain_epoch")?,
            joint_epoch: count("state.joint_epoch")?,
        })
    }
}

fn fresh_optimizer(model: &Model) -> AdamWState {
    let params: Vec<Tensor> = model
        .named_tensors()
        .into_iter()
        .map(|(_, t)| t.clone())
        .collect();
    AdamWState::new(&params)
}

/// Generator for one `(phase, epoch)` of a run.
fn epoch_rng(seed: u64, phase: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(phase);
    rng.set_word_pos(0);
    let mixed = rng.random::<u64>() ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut out = ChaCha8Rng::seed_from_u64(mixed);
    out.set_stream(phase);
    out
}

fn check_data(data: &[Tractogram], n_points: usize) -> Result<(), TrainError> {
    if data.is_empty() {
        return Err(TrainError::NoData);
    }
    for (index, t) in data.iter().enumerate() {
        if t.is_empty() {
            return Err(TrainError::EmptyTractogram { index });
        }
        if t.uniform_point_count() != Some(n_points) {
            return Err(TrainError::NotResampled { index, n_points });
        }
    }
    Ok(())
}

fn batch_indices(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<usize> {
    if batch >= n {
        return (0..n).collect();
    }
    let mut idx = sample(rng, n, batch).into_vec();
    idx.sort_unstable();
    idx
}

/// Streamline subsets visited by one tractogram in one epoch. `per_epoch == 0`
/// partitions a random permutation into near-equal batches of at most
/// `batch` streamlines; otherwise `per_epoch` independent random subsets.
fn epoch_batches(
    rng: &mut ChaCha8Rng,
    n: usize,
    batch: usize,
    per_epoch: usize,
) -> Vec<Vec<usize>> {
    if per_epoch > 0 {
        return (0..per_epoch)
            .map(|_| batch_indices(rng, n, batch))
            .collect();
    }
    let mut perm = sample(rng, n, n).into_vec();
    let count = n.div_ceil(batch.max(1));
    let mut out = Vec::with_capacity(count);
    let mut start = 0;
    for b in 0..count {
        let end = start + (n - start) / (count - b);
        let mut chunk = perm[start..end].to_vec();
        chunk.sort_unstable();
        out.push(chunk);
        start = end;
    }
    perm.clear();
    out
}

pub fn deformation_spec(cfg: &Config, seed: u64) -> DeformationSpec {
    DeformationSpec {
        affine_scale_range: cfg.deform_scale,
        rotation_range: cfg.deform_rotation_deg,
        translation_range: cfg.deform_translation,
        nonlinear_amplitude: cfg.deform_amplitude,
        nonlinear_control_grid: cfg.deform_grid,
        domain: cfg.deform_domain,
        seed,
    }
}

/// Mean Huber penalty over unordered pairs of `‖z_i - z_j‖ - d(i, j)`.
pub fn metric_alignment_loss(z: &Tensor, d: &DistanceMatrix, delta: f64) -> f64 {
    let n = z.nrows();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let dz: f64 = z
                .row(i)
                .iter()
                .zip(z.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            total += tractjoint_autodiff::huber(dz.sqrt() - d.get(i, j), delta);
        }
    }
    total / (n * (n - 1) / 2) as f64
}

/// Tape version of [`metric_alignment_loss`]; `z` is `[N, D]`.
pub fn metric_alignment_loss_var(
    tape: &mut Tape,
    z: Var,
    d: &DistanceMatrix,
    delta: f64,
) -> Result<Var, TensorError> {
    let n = tape.shape(z)[0];
    if n < 2 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let sq = tape.pairwise_sq_dist(z, z)?;
    let flat = tape.reshape(sq, &[n * n])?;
    let mut idx = Vec::with_capacity(n * (n - 1) / 2);
    let mut target = Vec::with_capacity(idx.capacity());
    for i in 0..n {
        for j in i + 1..n {
            idx.push(i * n + j);
            target.push(d.get(i, j));
        }
    }
    let pairs = tape.gather(flat, &idx)?;
    let dist = tape.sqrt(pairs);
    let t = tape.constant(Tensor::vector(target));
    let diff = tape.sub(dist, t)?;
    let h = tape.huber(diff, delta);
    tape.mean(h)
}

/// Loss terms of one pretraining step.
#[derive(Clone, Copy, Debug)]
pub struct PretrainTerms {
    pub equivariance: Var,
    pub diversity: Var,
    pub metric: Var,
    pub total: Var,
}

/// Builds the pretraining objective for one batch under one deformation.
pub fn pretrain_loss_var(
    tape: &mut Tape,
    model: &Model,
    vars: &ModelVars,
    batch: &Tractogram,
    deformation: &Deformation,
    cfg: &Config,
) -> Result<PretrainTerms, TrainError> {
    let deformed = deformation.apply(batch)?;
    let orig = model.forward(tape, vars, batch)?;
    let aug = model.forward(tape, vars, &deformed)?;
    let equivariance = equivariance_loss_var(tape, aug.keypoints, orig.keypoints, deformation)?;
    let delta = diversity_delta(batch, cfg.diversity_delta_frac);
    let diversity = diversity_loss_var(tape, orig.keypoints, delta)?;
    let d = pairwise_mdf(batch)?;
    let metric = metric_alignment_loss_var(tape, orig.streamlines, &d, cfg.huber_delta)?;

    let eq = tape.scale(equivariance, cfg.weight_equivariance);
    let div = tape.scale(diversity, cfg.weight_diversity);
    let met = tape.scale(metric, cfg.weight_metric);
    let kp = tape.add(eq, div)?;
    let sum = tape.add(kp, met)?;
    let total = match cfg.pretrain_combine {
        PretrainCombine::Folded => tape.scale(sum, 0.5),
        PretrainCombine::ThreeTerm => tape.scale(sum, 1.0 / 3.0),
    };
    Ok(PretrainTerms {
        equivariance,
        diversity,
        metric,
        total,
    })
}

/// Loss terms of one joint step. Terms a variant drops are `None`.
#[derive(Clone, Copy, Debug)]
pub struct JointTerms {
    pub registration: Option<Var>,
    pub kl: Option<Var>,
    pub metric: Var,
    pub total: Var,
}

/// Builds the joint objective for an (input, target) batch pair. `p_input`
/// and `p_target` are the target distributions of the batch rows.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss_var(
    tape: &mut Tape,
    model: &Model,
    vars: &ModelVars,
    input: &Tractogram,
    target: &Tractogram,
    p_input: &Tensor,
    p_target: &Tensor,
    cfg: &Config,
    variant: JointVariant,
) -> Result<JointTerms, TrainError> {
    let fi = model.forward(tape, vars, input)?;
    let ft = model.forward(tape, vars, target)?;

    let registration = if variant.uses_registration() {
        let tps = fit_tps_var(tape, fi.keypoints, ft.keypoints, cfg.tps_lambda)?;
        let warped = apply_tps_var(tape, &tps, fi.coords)?;
        Some(registration_loss_var(
            tape,
            warped,
            model.n_points(),
            target,
        )?)
    } else {
        None
    };

    let kl = match (variant.uses_clustering(), vars.centroids) {
        (true, Some(mu)) => {
            let qi = soft_assign_var(tape, fi.streamlines, mu)?;
            let qt = soft_assign_var(tape, ft.streamlines, mu)?;
            let ki = kl_loss_var(tape, p_input, qi)?;
            let kt = kl_loss_var(tape, p_target, qt)?;
            let k = tape.add(ki, kt)?;
            // Summed over the streamlines of each batch, averaged over the two batches.
            Some(tape.scale(k, 0.5))
        }
        (true, None) => return Err(ClusteringError::ZeroClusters.into()),
        (false, _) => None,
    };

    let di = pairwise_mdf(input)?;
    let dt = pairwise_mdf(target)?;
    let mi = metric_alignment_loss_var(tape, fi.streamlines, &di, cfg.huber_delta)?;
    let mt = metric_alignment_loss_var(tape, ft.streamlines, &dt, cfg.huber_delta)?;
    let m = tape.add(mi, mt)?;
    let metric = tape.scale(m, 0.5);

    let mut terms = vec![tape.scale(metric, cfg.weight_metric)];
    if let Some(r) = registration {
        terms.push(tape.scale(r, cfg.weight_registration));
    }
    if let Some(k) = kl {
        terms.push(tape.scale(k, cfg.weight_kl));
    }
    let count = terms.len();
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    let total = tape.scale(total, 1.0 / count as f64);
    Ok(JointTerms {
        registration,
        kl,
        metric,
        total,
    })
}

fn gradients(
    tape: &Tape,
    loss: Var,
    vars: &ModelVars,
    model: &Model,
) -> Result<Vec<Tensor>, TensorError> {
    let grads = tape.backward(loss)?;
    Ok(vars
        .all()
        .into_iter()
        .zip(model.named_tensors())
        .map(|(v, (_, t))| grads.get_or_zeros(v, t.shape()))
        .collect())
}

/// Applies one optimizer step, leaving `state` untouched on failure.
fn step(
    state: &mut TrainState,
    grads: &[Tensor],
    lr: f64,
    weight_decay: f64,
) -> Result<(), TensorError> {
    let names: Vec<String> = state
        .model
        .named_tensors()
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    let mut params: Vec<Tensor> = state
        .model
        .named_tensors()
        .into_iter()
        .map(|(_, t)| t.clone())
        .collect();
    let mut opt = state.optimizer.clone();
    let cfg = AdamWConfig {
        lr,
        weight_decay,
        ..AdamWConfig::default()
    };
    adamw_step(&mut params, grads, &mut opt, &cfg, &names)?;
    if params.iter().any(|p| !p.is_finite()) {
        return Err(TensorError::NonFiniteGradient("updated parameters".into()));
    }
    for (dst, src) in state.model.tensors_mut().into_iter().zip(params) {
        *dst = src;
    }
    state.optimizer = opt;
    Ok(())
}

fn diverged(phase: &'static str, epoch: usize, what: impl Into<String>) -> TrainError {
    TrainError::Diverged {
        phase,
        epoch,
        what: what.into(),
    }
}

/// Runs pretraining epochs until `state.pretrain_epoch == until`.
///
/// On a non-finite loss or gradient the error is returned and `state` holds
/// the parameters from before the offending step.
pub fn pretrain_until(
    state: &mut TrainState,
    data: &[Tractogram],
    cfg: &Config,
    until: usize,
) -> Result<LossReport, TrainError> {
    check_data(data, state.model.n_points())?;
    let mut report = LossReport::default();
    while state.pretrain_epoch < until {
        let epoch = state.pretrain_epoch;
        let lr = lr_schedule(epoch, cfg.lr, cfg.lr_decay, cfg.lr_decay_every);
        let mut rng = epoch_rng(state.seed, PHASE_PRETRAIN, epoch);
        let mut sums = [0.0; 4];
        let mut steps = 0usize;
        for t in data {
            for idx in epoch_batches(
                &mut rng,
                t.len(),
                cfg.batch_size,
                cfg.pretrain_batches_per_epoch,
            ) {
                let batch = t.subset(&idx);
                let deformation = sample_deformation(&deformation_spec(cfg, rng.random()))?;
                let mut tape = Tape::new();
                let vars = state.model.leaves(&mut tape);
                let terms =
                    pretrain_loss_var(&mut tape, &state.model, &vars, &batch, &deformation, cfg)?;
                let values = [
                    terms.equivariance,
                    terms.diversity,
                    terms.metric,
                    terms.total,
                ]
                .map(|v| tape.scalar_value(v));
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(diverged("pretrain", epoch, "loss"));
                }
                let grads = gradients(&tape, terms.total, &vars, &state.model)?;
                step(state, &grads, lr, cfg.weight_decay)
                    .map_err(|e| diverged("pretrain", epoch, e.to_string()))?;
                for (s, v) in sums.iter_mut().zip(values) {
                    *s += v;
                }
                steps += 1;
            }
        }
        let n = steps as f64;
        for (name, s) in [
            "pretrain.equivariance",
            "pretrain.diversity",
            "pretrain.metric_alignment",
            "pretrain.total",
        ]
        .iter()
        .zip(sums)
        {
            report.push(epoch, name, s / n);
        }
        state.pretrain_epoch += 1;
    }
    Ok(report)
}

/// Fresh state trained for `cfg.pretrain_epochs` epochs.
pub fn pretrain(data: &[Tractogram], cfg: &Config) -> Result<(TrainState, LossReport), TrainError> {
    let mut state = TrainState::init(cfg);
    let report = pretrain_until(&mut state, data, cfg, cfg.pretrain_epochs)?;
    Ok((state, report))
}

/// Streamline embeddings of every training tractogram, stacked.
pub fn embed_all(model: &Model, data: &[Tractogram]) -> Result<Tensor, TrainError> {
    let mut rows = Vec::new();
    let mut n = 0;
    let mut d = 0;
    for t in data {
        let (_, z) = model.embed(t)?;
        n += z.0.nrows();
        d = z.0.row_len();
        rows.extend_from_slice(z.0.data());
    }
    Ok(Tensor::new(vec![n, d], rows)?)
}

/// Initializes centroids with k-means on all embeddings and resets the
/// optimizer for the joint phase. Does nothing once centroids exist.
pub fn init_joint(
    state: &mut TrainState,
    data: &[Tractogram],
    cfg: &Config,
) -> Result<(), TrainError> {
    if state.model.centroids.is_some() {
        return Ok(());
    }
    check_data(data, state.model.n_points())?;
    let z = embed_all(&state.model, data)?;
    let seed = epoch_rng(state.seed, PHASE_KMEANS, 0).random();
    let centroids = kmeans_init(&z, cfg.clusters, seed, cfg.kmeans_max_iter)?;
    state.model.centroids = Some(centroids);
    state.optimizer = fresh_optimizer(&state.model);
    Ok(())
}

/// Runs joint epochs until `state.joint_epoch == until`, initializing
/// centroids first if needed.
pub fn joint_train_until(
    state: &mut TrainState,
    data: &[Tractogram],
    cfg: &Config,
    variant: JointVariant,
    until: usize,
) -> Result<LossReport, TrainError> {
    init_joint(state, data, cfg)?;
    let mut report = LossReport::default();
    let offsets: Vec<usize> = data
        .iter()
        .scan(0, |acc, t| {
            let o = *acc;
            *acc += t.len();
            Some(o)
        })
        .collect();
    while state.joint_epoch < until {
        let epoch = state.joint_epoch;
        let centroids = state.model.centroids.clone().expect("initialized above");
        let z = embed_all(&state.model, data)?;
        let q = soft_assign(&z, &centroids)?;
        let target = target_distribution(&q);
        let kl_full = kl_loss(&target.p, &q.0)? / z.nrows() as f64;
        let mut rng = epoch_rng(state.seed, PHASE_JOINT, epoch);
        let mut sums = [0.0; 4];
        let mut steps = 0usize;
        for (ti, t) in data.iter().enumerate() {
            for idx_i in epoch_batches(
                &mut rng,
                t.len(),
                cfg.batch_size,
                cfg.joint_batches_per_epoch,
            ) {
                // The target is another training tractogram, drawn uniformly.
                let tj = if data.len() > 1 {
                    let j = rng.random_range(0..data.len() - 1);
                    j + usize::from(j >= ti)
                } else {
                    ti
                };
                let idx_t = batch_indices(&mut rng, data[tj].len(), idx_i.len());
                let rows = |off: usize, idx: &[usize]| -> Result<Tensor, TensorError> {
                    let k = target.p.row_len();
                    let mut v = Vec::with_capacity(idx.len() * k);
                    for &i in idx {
                        v.extend_from_slice(target.p.row(off + i));
                    }
                    Tensor::new(vec![idx.len(), k], v)
                };
                let p_i = rows(offsets[ti], &idx_i)?;
                let p_t = rows(offsets[tj], &idx_t)?;
                let input = t.subset(&idx_i);
                let tgt = data[tj].subset(&idx_t);
                let mut tape = Tape::new();
                let vars = state.model.leaves(&mut tape);
                let terms = joint_loss_var(
                    &mut tape,
                    &state.model,
                    &vars,
                    &input,
                    &tgt,
                    &p_i,
                    &p_t,
                    cfg,
                    variant,
                )
                .map_err(|e| match e {
                    TrainError::Registration(RegistrationError::Singular { .. }) => {
                        diverged("joint", epoch, "TPS fit (singular keypoints)")
                    }
                    other => other,
                })?;
                let reg = terms.registration.map(|v| tape.scalar_value(v));
                let kl = terms.kl.map(|v| tape.scalar_value(v));
                let metric = tape.scalar_value(terms.metric);
                let total = tape.scalar_value(terms.total);
                if !total.is_finite() {
                    return Err(diverged("joint", epoch, "loss"));
                }
                let grads = gradients(&tape, terms.total, &vars, &state.model)?;
                step(state, &grads, cfg.joint_lr, cfg.weight_decay)
                    .map_err(|e| diverged("joint", epoch, e.to_string()))?;
                sums[0] += reg.unwrap_or(f64::NAN);
                sums[1] += kl.unwrap_or(f64::NAN);
                sums[2] += metric;
                sums[3] += total;
                steps += 1;
            }
        }
        let n = steps as f64;
        if variant.uses_registration() {
            report.push(epoch, "joint.registration", sums[0] / n);
        }
        if variant.uses_clustering() {
            report.push(epoch, "joint.kl", sums[1] / n);
        }
        report.push(epoch, "joint.metric_alignment", sums[2] / n);
        report.push(epoch, "joint.total", sums[3] / n);
        report.push(epoch, "joint.kl_all_streamlines", kl_full);
        report.push(epoch, "joint.dead_clusters", target.dead_clusters as f64);
        state.joint_epoch += 1;
    }
    Ok(report)
}

/// Joint training for `cfg.joint_epochs` epochs starting from a pretrained state.
pub fn joint_train(
    state: &mut TrainState,
    data: &[Tractogram],
    cfg: &Config,
    variant: JointVariant,
) -> Result<LossReport, TrainError> {
    joint_train_until(state, data, cfg, variant, cfg.joint_epochs)
}

/// Mean per-streamline `KL(P || Q)` over all of `data`, with `P` the
/// sharpened target of the current assignments.
pub fn clustering_kl(model: &Model, data: &[Tractogram]) -> Result<f64, TrainError> {
    let centroids = model
        .centroids
        .as_ref()
        .ok_or(ClusteringError::ZeroClusters)?;
    let z = embed_all(model, data)?;
    let q = soft_assign(&z, centroids)?;
    let p = target_distribution(&q);
    Ok(kl_loss(&p.p, &q.0)? / z.nrows() as f64)
}

/// Soft assignments of `t` under the trained model.
pub fn assign(model: &Model, t: &Tractogram) -> Result<SoftAssignments, TrainError> {
    let centroids = model
        .centroids
        .as_ref()
        .ok_or(ClusteringError::ZeroClusters)?;
    let (_, z) = model.embed(t)?;
    Ok(soft_assign(&z.0, centroids)?)
}

/// Flat coordinates of `t` as a `[M, 3]` tensor.
pub fn coordinates(t: &Tractogram) -> Tensor {
    coords_tensor(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Point3, Streamline};

    #[test]
    fn metric_alignment_examples() {
        let d = pairwise_mdf(&Tractogram::new(vec![
            Streamline::new(vec![Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 0.0, 0.0)]).unwrap(),
            Streamline::new(vec![Point3::new(0.0, 3.0, 0.0), Point3::new(1.0, 3.0, 0.0)]).unwrap(),
        ]))
        .unwrap();
        let z = Tensor::matrix(2, 2, vec![0.0, 0.0, 3.0, 4.0]).unwrap();
        assert!((metric_alignment_loss(&z, &d, 1.0) - 1.5).abs() < 1e-12);
        let exact = Tensor::matrix(2, 2, vec![0.0, 0.0, 0.0, 3.0]).unwrap();
        assert_eq!(metric_alignment_loss(&exact, &d, 1.0), 0.0);
        let one = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        assert_eq!(metric_alignment_loss(&one, &d.submatrix(&[0]), 1.0), 0.0);

        let mut tape = Tape::new();
        let zv = tape.leaf(z.clone());
        let l = metric_alignment_loss_var(&mut tape, zv, &d, 1.0).unwrap();
        assert!((tape.scalar_value(l) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn epoch_rng_differs_by_phase_and_epoch() {
        let a: u64 = epoch_rng(1, PHASE_PRETRAIN, 0).random();
        let b: u64 = epoch_rng(1, PHASE_PRETRAIN, 1).random();
        let c: u64 = epoch_rng(1, PHASE_JOINT, 0).random();
        let a2: u64 = epoch_rng(1, PHASE_PRETRAIN, 0).random();
        assert_eq!(a, a2);
        assert!(a != b && a != c);
    }

    #[test]
    fn report_ndjson() {
        let mut r = LossReport::default();
        r.push(3, "pretrain.total", 0.5);
        assert_eq!(
            r.to_ndjson(),
            "{\"epoch\":3,\"loss_name\":\"pretrain.total\",\"value\":0.5}\n"
        );
    }
}
