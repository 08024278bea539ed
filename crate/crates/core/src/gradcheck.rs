//! End-to-end gradient checks of every training loss through the full network.

use std::cell::RefCell;

use thiserror::Error;
use tractjoint_autodiff::{grad_check_with, GradCheckOptions, Tape, Tensor, TensorError, Var};

use crate::clustering::{
    kl_loss_var, kmeans_init, soft_assign, soft_assign_var, target_distribution,
};
use crate::geometry::{pairwise_mdf, DistanceMatrix, Tractogram};
use crate::io::config::{Config, Preset};
use crate::io::synth::{generate_synthetic, sample_deformation, DeformationSpec, SyntheticSpec};
use crate::model::Model;
use crate::registration::tps::{apply_tps_var, fit_tps_var};
use crate::registration::{
    diversity_loss_var, equivariance_loss_var, registration_loss_var, Deformation,
};
use crate::training::{joint_loss_var, pretrain_loss_var, JointVariant};

/// Pass threshold on the worst relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum BatteryError {
    #[error("could not build the check instance: {0}")]
    Setup(String),
    #[error("loss `{name}` failed to evaluate: {message}")]
    Loss { name: &'static str, message: String },
}

#[derive(Clone, Debug)]
pub struct BatteryOptions {
    pub seed: u64,
    /// Streamlines per tractogram (split across two bundles).
    pub streamlines: usize,
    pub n_points: usize,
    pub keypoints: usize,
    pub clusters: usize,
    /// Randomly chosen entries checked per parameter tensor; `None` checks all.
    pub entries_per_tensor: Option<usize>,
    pub eps: f64,
    pub fault_injection: bool,
}

impl Default for BatteryOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            streamlines: 8,
            n_points: 14,
            keypoints: 6,
            clusters: 2,
            entries_per_tensor: Some(24),
            eps: 1e-6,
            fault_injection: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LossCheck {
    pub name: &'static str,
    pub max_relative_error: f64,
    /// Worst relative error per parameter tensor.
    pub per_tensor: Vec<f64>,
    pub entries_checked: usize,
}

impl LossCheck {
    pub fn passed(&self) -> bool {
        self.max_relative_error < TOLERANCE
    }
}

struct Instance {
    cfg: Config,
    model: Model,
    input: Tractogram,
    target: Tractogram,
    deformation: Deformation,
    d_input: DistanceMatrix,
    p_input: Tensor,
    p_target: Tensor,
    delta: f64,
}

fn setup_err(e: impl std::fmt::Display) -> BatteryError {
    BatteryError::Setup(e.to_string())
}

fn instance(opts: &BatteryOptions) -> Result<Instance, BatteryError> {
    let mut cfg = Config::preset(Preset::Desk);
    cfg.seed = opts.seed;
    cfg.n_points = opts.n_points;
    cfg.keypoints = opts.keypoints;
    cfg.clusters = opts.clusters;
    cfg.knn_k = cfg.knn_k.min(opts.n_points - 1);
    let per_bundle = opts.streamlines.div_ceil(2).max(1);
    let synth = |seed| {
        generate_synthetic(&SyntheticSpec {
            bundle_count: 2,
            streamlines_per_bundle: per_bundle,
            n_points: opts.n_points,
            seed,
            ..Default::default()
        })
        .map(|(t, _)| t.subset(&(0..opts.streamlines.min(t.len())).collect::<Vec<_>>()))
    };
    let input = synth(opts.seed).map_err(setup_err)?;
    let other = synth(opts.seed.wrapping_add(1)).map_err(setup_err)?;
    let deformation = sample_deformation(&DeformationSpec {
        seed: opts.seed.wrapping_add(2),
        ..Default::default()
    })
    .map_err(setup_err)?;
    let target = deformation.apply(&other).map_err(setup_err)?;

    let mut model = Model::init(&cfg.model_config(), opts.seed);
    let (_, zi) = model.embed(&input).map_err(setup_err)?;
    let (_, zt) = model.embed(&target).map_err(setup_err)?;
    let mu = kmeans_init(&zi.0, opts.clusters, opts.seed, 20).map_err(setup_err)?;
    let p_input = target_distribution(&soft_assign(&zi.0, &mu).map_err(setup_err)?).p;
    let p_target = target_distribution(&soft_assign(&zt.0, &mu).map_err(setup_err)?).p;
    model.centroids = Some(mu);

    // A margin near the typical keypoint spacing keeps some hinge pairs active.
    let kp = crate::registration::tractogram_keypoints(&model, &input).map_err(setup_err)?;
    let mut dists = Vec::new();
    for (i, a) in kp.points().iter().enumerate() {
        for b in &kp.points()[i + 1..] {
            dists.push(a.distance(*b));
        }
    }
    dists.sort_by(f64::total_cmp);
    let delta = dists[dists.len() / 2];

    Ok(Instance {
        d_input: pairwise_mdf(&input).map_err(setup_err)?,
        cfg,
        model,
        input,
        target,
        deformation,
        p_input,
        p_target,
        delta,
    })
}

type LossFn<'a> = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, String> + 'a>;

fn losses(inst: &Instance) -> Vec<(&'static str, LossFn<'_>)> {
    let m = &inst.model;
    let s = |e: &dyn std::fmt::Display| e.to_string();
    vec![
        (
            "equivariance",
            Box::new(move |tape: &mut Tape, v: &[Var]| {
                let vars = m.vars_from(v);
                let deformed = inst.deformation.apply(&inst.input).map_err(|e| s(&e))?;
                let o = m.forward(tape, &vars, &inst.input).map_err(|e| s(&e))?;
                let a = m.forward(tape, &vars, &deformed).map_err(|e| s(&e))?;
                equivariance_loss_var(tape, a.keypoints, o.keypoints, &inst.deformation)
                    .map_err(|e| s(&e))
            }),
        ),
        (
            "diversity",
            Box::new(move |tape: &mut Tape, v: &[Var]| {
                let vars = m.vars_from(v);
                let o = m.forward(tape, &vars, &inst.input).map_err(|e| s(&e))?;
                diversity_loss_var(tape, o.keypoints, inst.delta).map_err(|e| s(&e))
            }),
        ),
        (
            "metric_alignment",
            Box::new(move |tape: &mut Tape, v: &[Var]| {
                let vars = m.vars_from(v);
                let o = m.forward(tape, &vars, &inst.input).map_err(|e| s(&e))?;
                crate::training::metric_alignment_loss_var(
                    tape,
                    o.streamlines,
                    &inst.d_input,
                    inst.cfg.huber_delta,
                )
                .map_err(|e| s(&e))
            }),
        ),
        (
            "registration",
            Box::new(move |tape: &mut Tape, v: &[Var]| {
                let vars = m.vars_from(v);
                let fi = m.forward(tape, &vars, &inst.input).map_err(|e| s(&e))?;
                let ft = m.forward(tape, &vars, &inst.target).map_err(|e| s(&e))?;
                let tps = fit_tps_var(tape, fi.keypoints, ft.keypoints, inst.cfg.tps_lambda)
                    .map_err(|e| s(&e))?;
                let warped = apply_tps_var(tape, &tps, fi.coords).map_err(|e| s(&e))?;
                registration_loss_var(tape, warped, m.n_points(), &inst.target).map_err(|e| s(&e))
            }),
        ),
        (
            "kl",
            Box::new(move |tape: &mut Tape, v: &[Var]| {
                let vars = m.vars_from(v);
                let o = m.forward(tape, &vars, &inst.input).map_err(|e| s(&e))?;
                let mu = vars.centroids.ok_or("no centroids")?;
                let q = soft_assign_var(tape, o.streamlines, mu).map_err(|e| s(&e))?;
                kl_loss_var(tape, &inst.p_input, q).map_err(|e| s(&e))
            }),
        ),
        (
            "pretrain_total",
            Box::new(move |tape: &mut Tape, v: &[Var]| {
                let vars = m.vars_from(v);
                pretrain_loss_var(tape, m, &vars, &inst.input, &inst.deformation, &inst.cfg)
                    .map(|t| t.total)
                    .map_err(|e| s(&e))
            }),
        ),
        (
            "joint_total",
            Box::new(move |tape: &mut Tape, v: &[Var]| {
                let vars = m.vars_from(v);
                joint_loss_var(
                    tape,
                    m,
                    &vars,
                    &inst.input,
                    &inst.target,
                    &inst.p_input,
                    &inst.p_target,
                    &inst.cfg,
                    JointVariant::Joint,
                )
                .map(|t| t.total)
                .map_err(|e| s(&e))
            }),
        ),
    ]
}

/// Checks every loss against central differences over all parameter groups.
pub fn gradient_battery(opts: &BatteryOptions) -> Result<Vec<LossCheck>, BatteryError> {
    let inst = instance(opts)?;
    let params: Vec<Tensor> = inst
        .model
        .named_tensors()
        .into_iter()
        .map(|(_, t)| t.clone())
        .collect();
    let check = GradCheckOptions {
        eps: opts.eps,
        max_entries_per_input: opts.entries_per_tensor,
        seed: opts.seed,
        fault_injection: opts.fault_injection,
    };
    let mut out = Vec::new();
    for (name, f) in losses(&inst) {
        let failure = RefCell::new(None);
        let report = grad_check_with(
            |tape, vars| {
                f(tape, vars).map_err(|message| {
                    failure.borrow_mut().get_or_insert(message);
                    TensorError::Empty { op: name }
                })
            },
            &params,
            &check,
        );
        if let Some(message) = failure.into_inner() {
            return Err(BatteryError::Loss { name, message });
        }
        let report = report.map_err(|e| BatteryError::Loss {
            name,
            message: e.to_string(),
        })?;
        out.push(LossCheck {
            name,
            max_relative_error: report.max_relative_error,
            entries_checked: report.entries_checked,
            per_tensor: report.per_input.clone(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fault_injection_is_detected() {
        let opts = BatteryOptions {
            streamlines: 4,
            entries_per_tensor: Some(4),
            fault_injection: true,
            ..Default::default()
        };
        let checks = gradient_battery(&opts).unwrap();
        assert!(checks.iter().any(|c| !c.passed()));
    }
}
