//! Keypoint-driven registration: keypoint prediction, TPS fitting and the
//! losses that train the keypoint detector.

pub mod keypoints;
pub mod tps;

use thiserror::Error;
use tractjoint_autodiff::{Tape, Tensor, TensorError, Var};

use crate::embedding::{coords_tensor, EmbeddingError};
use crate::geometry::{mdf_components, Affine3, GeometryError, Point3, Tractogram};
use crate::model::Model;
use keypoints::{predict_keypoints, KeypointSet};
use tps::{apply_affine_var, apply_tps, apply_tps_var, fit_tps, TpsTransform, TpsVars};

#[derive(Debug, Error)]
pub enum RegistrationError {
    #[error("keypoint sets differ in size ({0} vs {1})")]
    KeypointCountMismatch(usize, usize),
    #[error("a TPS fit needs at least 4 control points, got {0}")]
    TooFewControls(usize),
    #[error("TPS regularization must be finite and >= 0, got {0}")]
    BadLambda(f64),
    #[error("TPS system is singular at lambda = {lambda}; the keypoints are degenerate, try a larger lambda")]
    Singular { lambda: f64 },
    #[error("transform file line {line}: {message}")]
    TransformParse { line: usize, message: String },
    #[error("no points to predict keypoints from")]
    NoPoints,
    #[error("{coords} coordinates but {embeddings} point embeddings")]
    PointCountMismatch { coords: usize, embeddings: usize },
    #[error("need at least two keypoints")]
    TooFewKeypoints,
    #[error("empty tractogram")]
    Empty,
    #[error("deformation ranges must be finite and nonnegative")]
    BadRange,
    #[error("streamlines must be resampled to a common point count")]
    NotResampled,
    #[error("tractograms have {0} and {1} points per streamline")]
    ResampleMismatch(usize, usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// An augmentation pair: the nonlinear warp `Φ` followed by the affine `G`.
#[derive(Clone, Debug, PartialEq)]
pub struct Deformation {
    pub affine: Affine3,
    pub warp: TpsTransform,
}

impl Deformation {
    pub fn identity() -> Self {
        Self {
            affine: Affine3::identity(),
            warp: TpsTransform::identity(),
        }
    }

    /// `G(Φ(p))`.
    pub fn apply_point(&self, p: Point3) -> Point3 {
        self.affine.apply(self.warp.apply(p))
    }

    pub fn apply(&self, t: &Tractogram) -> Result<Tractogram, GeometryError> {
        if !self.affine.is_finite() || !self.warp.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        t.map_points(|p| self.apply_point(p))
    }

    /// Tape version applied to `[M, 3]` points.
    pub fn apply_var(&self, tape: &mut Tape, points: Var) -> Result<Var, TensorError> {
        let warped = if self.warp.control.is_empty() {
            apply_affine_var(tape, &self.warp.affine, points)?
        } else {
            let vars = TpsVars::constant(tape, &self.warp);
            apply_tps_var(tape, &vars, points)?
        };
        apply_affine_var(tape, &self.affine, warped)
    }
}

fn uniform_points(t: &Tractogram) -> Result<usize, RegistrationError> {
    if t.is_empty() {
        return Err(RegistrationError::Empty);
    }
    t.uniform_point_count()
        .ok_or(RegistrationError::NotResampled)
}

/// A nearest-neighbour match used by the symmetric registration loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub warped: usize,
    pub target: usize,
    pub flipped: bool,
    pub distance: f64,
}

/// For every warped streamline its nearest target and for every target its
/// nearest warped streamline (ties to the lowest index, direct before flipped).
pub fn nearest_matches(
    warped: &Tractogram,
    target: &Tractogram,
) -> Result<(Vec<Match>, Vec<Match>), RegistrationError> {
    let nw = uniform_points(warped)?;
    let nt = uniform_points(target)?;
    if nw != nt {
        return Err(RegistrationError::ResampleMismatch(nw, nt));
    }
    let (a, b) = (warped.streamlines(), target.streamlines());
    let mut d = vec![(0.0, false); a.len() * b.len()];
    for (i, s) in a.iter().enumerate() {
        for (j, u) in b.iter().enumerate() {
            let (direct, flipped) = mdf_components(s.points(), u.points());
            d[i * b.len() + j] = if flipped < direct {
                (flipped, true)
            } else {
                (direct, false)
            };
        }
    }
    let pick = |i: usize, j: usize| {
        let (distance, flipped) = d[i * b.len() + j];
        Match {
            warped: i,
            target: j,
            flipped,
            distance,
        }
    };
    let forward = (0..a.len())
        .map(|i| {
            (0..b.len())
                .map(|j| pick(i, j))
                .fold(None, |best: Option<Match>, m| match best {
                    Some(bm) if bm.distance <= m.distance => Some(bm),
                    _ => Some(m),
                })
                .unwrap()
        })
        .collect();
    let backward = (0..b.len())
        .map(|j| {
            (0..a.len())
                .map(|i| pick(i, j))
                .fold(None, |best: Option<Match>, m| match best {
                    Some(bm) if bm.distance <= m.distance => Some(bm),
                    _ => Some(m),
                })
                .unwrap()
        })
        .collect();
    Ok((forward, backward))
}

/// Symmetric nearest-neighbour MDF between a warped and a target tractogram.
pub fn registration_loss(
    warped: &Tractogram,
    target: &Tractogram,
) -> Result<f64, RegistrationError> {
    let (fwd, bwd) = nearest_matches(warped, target)?;
    let mean = |m: &[Match]| m.iter().map(|m| m.distance).sum::<f64>() / m.len() as f64;
    Ok(mean(&fwd) + mean(&bwd))
}

/// Tape version of [`registration_loss`]. `warped` is `[N_I * n_points, 3]`
/// on the tape, `target` the resampled target tractogram. Gradients flow
/// through the matched pairs selected on the current values.
pub fn registration_loss_var(
    tape: &mut Tape,
    warped: Var,
    n_points: usize,
    target: &Tractogram,
) -> Result<Var, RegistrationError> {
    let values = tape.value(warped).clone();
    let warped_t = Tractogram::from_flat_coords(values.data(), n_points, None)?;
    let (fwd, bwd) = nearest_matches(&warped_t, target)?;
    let tv = tape.constant(coords_tensor(target));
    let mut idx_w = Vec::with_capacity((fwd.len() + bwd.len()) * n_points);
    let mut idx_t = Vec::with_capacity(idx_w.capacity());
    for m in fwd.iter().chain(&bwd) {
        for k in 0..n_points {
            idx_w.push(m.warped * n_points + k);
            let kt = if m.flipped { n_points - 1 - k } else { k };
            idx_t.push(m.target * n_points + kt);
        }
    }
    let gw = tape.gather(warped, &idx_w)?;
    let gt = tape.gather(tv, &idx_t)?;
    let diff = tape.sub(gw, gt)?;
    let sq = tape.squared_norm(diff)?;
    let dist = tape.sqrt(sq);
    let pairs = fwd.len() + bwd.len();
    let dist = tape.reshape(dist, &[pairs, n_points])?;
    let per_pair = tape.reduce_mean(dist, 1)?;
    // Weight forward pairs by 1/N_I and backward pairs by 1/N_T.
    let mut w = vec![1.0 / fwd.len() as f64; fwd.len()];
    w.extend(std::iter::repeat(1.0 / bwd.len() as f64).take(bwd.len()));
    let w = tape.constant(Tensor::vector(w));
    let weighted = tape.mul(per_pair, w)?;
    Ok(tape.sum(weighted))
}

/// Mean squared distance between `kp_aug` (predicted on the deformed data)
/// and the deformation applied to `kp` (predicted on the original).
pub fn equivariance_loss_var(
    tape: &mut Tape,
    kp_aug: Var,
    kp: Var,
    deformation: &Deformation,
) -> Result<Var, TensorError> {
    let mapped = deformation.apply_var(tape, kp)?;
    let diff = tape.sub(kp_aug, mapped)?;
    let sq = tape.squared_norm(diff)?;
    tape.mean(sq)
}

/// Equivariance loss of `model` on `t` under `deformation`.
pub fn equivariance_loss(
    t: &Tractogram,
    deformation: &Deformation,
    model: &Model,
) -> Result<f64, RegistrationError> {
    if t.is_empty() {
        return Err(RegistrationError::Empty);
    }
    let deformed = deformation.apply(t)?;
    let mut tape = Tape::new();
    let vars = model.constants(&mut tape);
    let orig = model.forward(&mut tape, &vars, t)?;
    let aug = model.forward(&mut tape, &vars, &deformed)?;
    let loss = equivariance_loss_var(&mut tape, aug.keypoints, orig.keypoints, deformation)?;
    Ok(tape.scalar_value(loss))
}

/// Squared-hinge repulsion between keypoints (`[A, 3]`), averaged over pairs.
pub fn diversity_loss_var(tape: &mut Tape, kp: Var, delta: f64) -> Result<Var, RegistrationError> {
    let a = tape.shape(kp)[0];
    if a < 2 {
        return Err(RegistrationError::TooFewKeypoints);
    }
    let (mut left, mut right) = (Vec::new(), Vec::new());
    for i in 0..a {
        for j in i + 1..a {
            left.push(i);
            right.push(j);
        }
    }
    let pl = tape.gather(kp, &left)?;
    let pr = tape.gather(kp, &right)?;
    let diff = tape.sub(pl, pr)?;
    let sq = tape.squared_norm(diff)?;
    let d = tape.sqrt(sq);
    let neg = tape.scale(d, -1.0);
    let gap = tape.add_scalar(neg, delta);
    let hinge = tape.relu(gap);
    let h2 = tape.mul(hinge, hinge)?;
    Ok(tape.mean(h2)?)
}

pub fn diversity_loss(kps: &KeypointSet, delta: f64) -> Result<f64, RegistrationError> {
    let p = kps.points();
    if p.len() < 2 {
        return Err(RegistrationError::TooFewKeypoints);
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..p.len() {
        for j in i + 1..p.len() {
            let gap = (delta - p[i].distance(p[j])).max(0.0);
            total += gap * gap;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Diversity margin: a fraction of the bounding-box diagonal of `t`.
pub fn diversity_delta(t: &Tractogram, fraction: f64) -> f64 {
    t.bounds()
        .map(|(lo, hi)| fraction * lo.distance(hi))
        .unwrap_or(0.0)
}

/// Keypoints of a whole tractogram under `model`.
pub fn tractogram_keypoints(
    model: &Model,
    t: &Tractogram,
) -> Result<KeypointSet, RegistrationError> {
    if t.is_empty() {
        return Err(RegistrationError::Empty);
    }
    let (h, _) = model.embed(t)?;
    let coords: Vec<Point3> = t.points().collect();
    Ok(predict_keypoints(&h, &model.head, &coords)?.1)
}

/// Warps `source` into the space of `target` with a TPS fitted between the
/// keypoints the model predicts on each.
pub fn register(
    source: &Tractogram,
    target: &Tractogram,
    model: &Model,
    lambda: f64,
) -> Result<(Tractogram, TpsTransform), RegistrationError> {
    let ks = tractogram_keypoints(model, source)?;
    let kt = tractogram_keypoints(model, target)?;
    let transform = fit_tps(ks.points(), kt.points(), lambda)?;
    let warped = apply_tps(&transform, source)?;
    Ok((warped, transform))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Streamline;

    fn line(offset: f64, n: usize) -> Streamline {
        Streamline::new((0..n).map(|k| Point3::new(k as f64, offset, 0.0)).collect()).unwrap()
    }

    #[test]
    fn identical_sets_have_zero_loss() {
        let t = Tractogram::new(vec![line(0.0, 5), line(4.0, 5)]);
        assert_eq!(registration_loss(&t, &t).unwrap(), 0.0);
    }

    #[test]
    fn parallel_offset_counts_twice() {
        let a = Tractogram::new(vec![line(0.0, 5)]);
        let b = Tractogram::new(vec![line(3.0, 5)]);
        assert!((registration_loss(&a, &b).unwrap() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn empty_is_rejected() {
        let a = Tractogram::new(vec![line(0.0, 5)]);
        assert!(matches!(
            registration_loss(&Tractogram::new(vec![]), &a),
            Err(RegistrationError::Empty)
        ));
    }

    #[test]
    fn tape_loss_matches_plain() {
        let a = Tractogram::new(vec![line(0.0, 4), line(2.0, 4).reversed()]);
        let b = Tractogram::new(vec![line(1.0, 4), line(5.0, 4), line(-3.0, 4)]);
        let mut tape = Tape::new();
        let w = tape.leaf(coords_tensor(&a));
        let l = registration_loss_var(&mut tape, w, 4, &b).unwrap();
        let plain = registration_loss(&a, &b).unwrap();
        assert!((tape.scalar_value(l) - plain).abs() < 1e-12);
    }

    #[test]
    fn diversity_examples() {
        let d = 2.0;
        let same = KeypointSet(vec![Point3::new(1.0, 1.0, 1.0); 3]);
        assert!((diversity_loss(&same, d).unwrap() - d * d).abs() < 1e-12);
        let far = KeypointSet(vec![Point3::new(0.0, 0.0, 0.0), Point3::new(5.0, 0.0, 0.0)]);
        assert_eq!(diversity_loss(&far, d).unwrap(), 0.0);
        let half = KeypointSet(vec![Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 0.0, 0.0)]);
        assert!((diversity_loss(&half, d).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identity_deformation_is_identity() {
        let t = Tractogram::new(vec![line(0.0, 4)]);
        assert_eq!(Deformation::identity().apply(&t).unwrap(), t);
    }
}
