use std::path::{Path, PathBuf};

use serde_json::json;
use tractjoint::clustering::{hard_assign, ClusterSummary};
use tractjoint::geometry::Tractogram;
use tractjoint::gradcheck::{gradient_battery, BatteryOptions, TOLERANCE};
use tractjoint::io::config::{read_config, Config};
use tractjoint::io::labels::{read_labels, write_labels};
use tractjoint::io::synth::{generate_synthetic, sample_deformation};
use tractjoint::io::tck::{read_tck, write_tck};
use tractjoint::io::write_atomic;
use tractjoint::metrics::{self, entry, MetricsReport};
use tractjoint::model::Model;
use tractjoint::registration;
use tractjoint::training::{
    assign, joint_train_until, pretrain_until, JointVariant, LossReport, TrainError, TrainState,
};
use tractjoint_autodiff::checkpoint::{encode_checkpoint, load_checkpoint};

use crate::error::{io_err, CliError};
use crate::spec::parse_spec;
use crate::{
    ClusterArgs, DumpConfigArgs, EvalArgs, GradcheckArgs, PretrainArgs, RegisterArgs, SynthArgs,
    TrainArgs, TrainingCommon, VariantArg,
};

fn read_tractogram(path: &Path) -> Result<Tractogram, CliError> {
    read_tck(path).map_err(|source| CliError::Tck {
        path: path.into(),
        source,
    })
}

fn save_tractogram(t: &Tractogram, path: &Path) -> Result<(), CliError> {
    write_tck(t, path).map_err(|source| CliError::Tck {
        path: path.into(),
        source,
    })
}

fn read_label_file(path: &Path) -> Result<Vec<i64>, CliError> {
    read_labels(path).map_err(|source| CliError::Labels {
        path: path.into(),
        source,
    })
}

fn save_labels(labels: &[i64], path: &Path) -> Result<(), CliError> {
    write_labels(labels, path).map_err(|source| CliError::Labels {
        path: path.into(),
        source,
    })
}

fn save_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    write_atomic(path, bytes).map_err(io_err(path))
}

fn records(path: &Path) -> Result<Vec<(String, tractjoint_autodiff::Tensor)>, CliError> {
    load_checkpoint(path).map_err(|source| CliError::Checkpoint {
        path: path.into(),
        source,
    })
}

fn load_model(path: &Path) -> Result<Model, CliError> {
    Ok(Model::from_records(&records(path)?)?)
}

fn load_state(path: &Path) -> Result<TrainState, CliError> {
    TrainState::from_records(&records(path)?).map_err(|e| match e {
        TrainError::Checkpoint(source) => CliError::Checkpoint {
            path: path.into(),
            source,
        },
        other => CliError::Usage(format!("{}: {other}", path.display())),
    })
}

fn save_state(state: &TrainState, path: &Path) -> Result<(), CliError> {
    save_bytes(path, &encode_checkpoint(&state.to_records()))
}

fn load_config(path: Option<&Path>) -> Result<Config, CliError> {
    let cfg = match path {
        Some(p) => read_config(p)?,
        None => Config::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn resampled(t: Tractogram, n_points: usize) -> Result<Tractogram, CliError> {
    if t.uniform_point_count() == Some(n_points) {
        Ok(t)
    } else {
        Ok(t.resampled(n_points)?)
    }
}

/// Every `.tck` file of `dir` in name order, resampled to `n_points`.
fn load_data(dir: &Path, n_points: usize) -> Result<Vec<Tractogram>, CliError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "tck"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Usage(format!(
            "no .tck files in {}",
            dir.display()
        )));
    }
    files
        .iter()
        .map(|f| resampled(read_tractogram(f)?, n_points))
        .collect()
}

fn write_json(value: &serde_json::Value, path: Option<&Path>) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match path {
        Some(p) => save_bytes(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn log_path(common: &TrainingCommon) -> PathBuf {
    common.log.clone().unwrap_or_else(|| {
        let mut name = common.out.as_os_str().to_owned();
        name.push(".losses.ndjson");
        PathBuf::from(name)
    })
}

/// Writes the checkpoint either way; on failure it holds the last good step.
fn finish_training(
    state: &TrainState,
    result: Result<LossReport, TrainError>,
    common: &TrainingCommon,
) -> Result<LossReport, CliError> {
    save_state(state, &common.out)?;
    let report = result?;
    save_bytes(&log_path(common), report.to_ndjson().as_bytes())?;
    Ok(report)
}

fn last(report: &LossReport, name: &str) -> String {
    report
        .series(name)
        .last()
        .map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

pub fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let text = match &a.spec {
        Some(p) => std::fs::read_to_string(p).map_err(io_err(p))?,
        None => String::new(),
    };
    let (spec, deform) = parse_spec(&text, a.seed)?;
    let (t, labels) = generate_synthetic(&spec)?;
    let warped = match &a.warped_out {
        Some(_) => Some(sample_deformation(&deform)?.apply(&t)?),
        None => None,
    };
    save_tractogram(&t, &a.out)?;
    save_labels(&labels, &a.labels)?;
    if let (Some(w), Some(p)) = (&warped, &a.warped_out) {
        save_tractogram(w, p)?;
    }
    eprintln!(
        "wrote {} streamlines in {} bundles",
        t.len(),
        spec.bundle_count
    );
    Ok(())
}

pub fn pretrain(a: &PretrainArgs) -> Result<(), CliError> {
    let c = &a.common;
    let mut cfg = load_config(c.config.as_deref())?;
    if let Some(e) = c.epochs {
        cfg.pretrain_epochs = e;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let mut state = match &a.resume {
        Some(p) => {
            let mut s = load_state(p)?;
            if let Some(seed) = c.seed {
                s.seed = seed;
            }
            s
        }
        None => TrainState::init(&cfg),
    };
    let data = load_data(&c.data, state.model.n_points())?;
    let result = pretrain_until(&mut state, &data, &cfg, cfg.pretrain_epochs);
    let report = finish_training(&state, result, c)?;
    eprintln!(
        "pretrained to epoch {} on {} tractograms; equivariance {}",
        state.pretrain_epoch,
        data.len(),
        last(&report, "pretrain.equivariance")
    );
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let c = &a.common;
    let mut cfg = load_config(c.config.as_deref())?;
    if let Some(e) = c.epochs {
        cfg.joint_epochs = e;
    }
    let mut state = load_state(&a.init)?;
    if let Some(seed) = c.seed {
        state.seed = seed;
    }
    let data = load_data(&c.data, state.model.n_points())?;
    let variant = match a.variant {
        VariantArg::Joint => JointVariant::Joint,
        VariantArg::RegistrationOnly => JointVariant::RegistrationOnly,
        VariantArg::ClusteringOnly => JointVariant::ClusteringOnly,
    };
    let result = joint_train_until(&mut state, &data, &cfg, variant, cfg.joint_epochs);
    let report = finish_training(&state, result, c)?;
    eprintln!(
        "joint training to epoch {}; registration {} kl {}",
        state.joint_epoch,
        last(&report, "joint.registration"),
        last(&report, "joint.kl")
    );
    Ok(())
}

pub fn register(a: &RegisterArgs) -> Result<(), CliError> {
    if !(a.lambda >= 0.0 && a.lambda.is_finite()) {
        return Err(CliError::Usage(format!(
            "--lambda must be finite and nonnegative, got {}",
            a.lambda
        )));
    }
    let model = load_model(&a.ckpt)?;
    let source = resampled(read_tractogram(&a.source)?, model.n_points())?;
    let target = resampled(read_tractogram(&a.target)?, model.n_points())?;
    let (warped, transform) = registration::register(&source, &target, &model, a.lambda)?;
    if let Some(p) = &a.save_transform {
        save_bytes(p, transform.to_text().as_bytes())?;
    }
    save_tractogram(&warped, &a.out)?;
    eprintln!(
        "registered {} streamlines; ABD {:.4} -> {:.4}",
        source.len(),
        metrics::abd(&source, &target)?,
        metrics::abd(&warped, &target)?
    );
    Ok(())
}

pub fn cluster(a: &ClusterArgs) -> Result<(), CliError> {
    if !(a.thr >= 0.0 && a.thr.is_finite()) {
        return Err(CliError::Usage(format!(
            "--thr must be finite and nonnegative, got {}",
            a.thr
        )));
    }
    let model = load_model(&a.ckpt)?;
    let Some(k) = model.centroids.as_ref().map(|c| c.nrows()) else {
        return Err(CliError::Usage(format!(
            "{} has no cluster centroids; run `train` first",
            a.ckpt.display()
        )));
    };
    let t = resampled(read_tractogram(&a.input)?, model.n_points())?;
    let q = assign(&model, &t)?;
    let labels = hard_assign(&q, a.thr);
    let summary = ClusterSummary::from_labels(&labels, k);
    save_labels(&labels, &a.out_labels)?;
    write_json(&serde_json::to_value(&summary)?, a.summary.as_deref())?;
    eprintln!(
        "assigned {} streamlines to {k} clusters; {} rejected",
        labels.len(),
        summary.rejected_count
    );
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let usage = |m: &str| Err(CliError::Usage(m.into()));
    if !a.true_labels.is_empty() && a.true_labels.len() != a.pred_labels.len() {
        return usage("--true-labels must pair with --pred-labels");
    }
    if !a.tractograms.is_empty() && a.tractograms.len() != a.pred_labels.len() {
        return usage("--tractograms must pair with --pred-labels");
    }
    if a.registered.len() != a.targets.len() {
        return usage("--registered must pair with --targets");
    }
    if a.pred_labels.is_empty() && a.registered.is_empty() {
        return usage("nothing to evaluate; give --pred-labels or --registered/--targets");
    }
    let pred: Vec<Vec<i64>> = a
        .pred_labels
        .iter()
        .map(|p| read_label_file(p))
        .collect::<Result<_, _>>()?;
    let mut report = MetricsReport::new();

    if !pred.is_empty() {
        let rates: Vec<f64> = pred.iter().map(|l| metrics::rejection_rate(l)).collect();
        report.insert(
            "rejection_rate".into(),
            entry(
                mean(&rates),
                metrics::REJECTION_ID,
                json!({ "per_subject": rates }),
            ),
        );
        let k = a.clusters.unwrap_or_else(|| {
            pred.iter()
                .flatten()
                .copied()
                .max()
                .map_or(0, |m| m + 1)
                .max(0) as usize
        });
        if k > 0 {
            report.insert(
                "wmpg".into(),
                entry(
                    metrics::wmpg(&pred, k, a.min_count)?,
                    metrics::WMPG_ID,
                    json!({ "K": k, "min_count": a.min_count, "subjects": pred.len() }),
                ),
            );
        }
    }
    if !a.true_labels.is_empty() {
        let mut aris = Vec::new();
        for (p, t) in pred.iter().zip(&a.true_labels) {
            aris.push(metrics::adjusted_rand_index(p, &read_label_file(t)?)?);
        }
        report.insert(
            "ari".into(),
            entry(mean(&aris), metrics::ARI_ID, json!({ "per_subject": aris })),
        );
    }
    if !a.tractograms.is_empty() {
        let mut alphas = Vec::new();
        for (p, t) in pred.iter().zip(&a.tractograms) {
            alphas.push(metrics::alpha_compactness(&read_tractogram(t)?, p)?);
        }
        report.insert(
            "alpha".into(),
            entry(
                mean(&alphas),
                metrics::ALPHA_ID,
                json!({ "per_subject": alphas }),
            ),
        );
    }
    if !a.registered.is_empty() {
        let (mut abds, mut dices) = (Vec::new(), Vec::new());
        for (r, t) in a.registered.iter().zip(&a.targets) {
            let (r, t) = (read_tractogram(r)?, read_tractogram(t)?);
            dices.push(metrics::wdice(&r, &t, a.spacing)?);
            let n = t
                .uniform_point_count()
                .ok_or(metrics::MetricsError::NotResampled)?;
            abds.push(metrics::abd(&resampled(r, n)?, &t)?);
        }
        report.insert(
            "abd".into(),
            entry(mean(&abds), metrics::ABD_ID, json!({ "per_pair": abds })),
        );
        report.insert(
            "wdice".into(),
            entry(
                mean(&dices),
                metrics::WDICE_ID,
                json!({ "per_pair": dices, "spacing_mm": a.spacing }),
            ),
        );
    }
    write_json(&serde_json::to_value(&report)?, Some(&a.report))?;
    for (name, e) in &report {
        eprintln!("{name}: {:.6}", e.value);
    }
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<(), CliError> {
    let checks = gradient_battery(&BatteryOptions {
        seed: a.seed,
        fault_injection: a.corrupt_gradients,
        ..Default::default()
    })?;
    let losses: Vec<_> = checks
        .iter()
        .map(|c| {
            json!({
                "loss": c.name,
                "max_relative_error": c.max_relative_error,
                "entries_checked": c.entries_checked,
                "passed": c.passed(),
            })
        })
        .collect();
    let failed: Vec<&str> = checks
        .iter()
        .filter(|c| !c.passed())
        .map(|c| c.name)
        .collect();
    write_json(
        &json!({
            "seed": a.seed,
            "tolerance": TOLERANCE,
            "passed": failed.is_empty(),
            "losses": losses,
        }),
        a.report.as_deref(),
    )?;
    for c in &checks {
        eprintln!(
            "{:<18} {:.3e} {}",
            c.name,
            c.max_relative_error,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradCheckFailed(failed.join(", ")))
    }
}

pub fn dump_config(a: &DumpConfigArgs) -> Result<(), CliError> {
    print!("{}", load_config(a.config.as_deref())?.dump());
    Ok(())
}
