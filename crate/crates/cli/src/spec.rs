//! `key = value` description of a synthetic dataset.

use std::str::FromStr;

use tractjoint::io::synth::{DeformationSpec, SyntheticSpec};

use crate::error::CliError;

fn num<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T, CliError> {
    value.parse().map_err(|_| CliError::Spec {
        line,
        message: format!("bad value `{value}` for `{key}`"),
    })
}

pub fn parse_spec(text: &str, seed: u64) -> Result<(SyntheticSpec, DeformationSpec), CliError> {
    let mut synth = SyntheticSpec {
        seed,
        ..Default::default()
    };
    let mut deform = DeformationSpec {
        seed: seed.wrapping_add(1000),
        ..Default::default()
    };
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| CliError::Spec {
            line: i + 1,
            message,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err("expected `key = value`".into()))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "bundle_count" => synth.bundle_count = num(key, value, i + 1)?,
            "streamlines_per_bundle" => synth.streamlines_per_bundle = num(key, value, i + 1)?,
            "jitter_sigma" => synth.jitter_sigma = num(key, value, i + 1)?,
            "n_points" => synth.n_points = num(key, value, i + 1)?,
            "deform_scale" => deform.affine_scale_range = num(key, value, i + 1)?,
            "deform_rotation_deg" => deform.rotation_range = num(key, value, i + 1)?,
            "deform_translation" => deform.translation_range = num(key, value, i + 1)?,
            "deform_amplitude" => deform.nonlinear_amplitude = num(key, value, i + 1)?,
            "deform_grid" => deform.nonlinear_control_grid = num(key, value, i + 1)?,
            "deform_domain" => deform.domain = num(key, value, i + 1)?,
            _ => return Err(err(format!("unknown key `{key}`"))),
        }
    }
    if synth.bundle_count == 0 || synth.streamlines_per_bundle == 0 || synth.n_points < 2 {
        return Err(CliError::Usage(
            "bundle_count and streamlines_per_bundle must be positive, n_points at least 2".into(),
        ));
    }
    Ok((synth, deform))
}
