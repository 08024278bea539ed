//! Keypoints as expectations of point coordinates under learned per-keypoint
//! distributions over the points.

use rand_chacha::ChaCha8Rng;
use tractjoint_autodiff::{Tape, Tensor, TensorError, Var};

use super::tps::{points_tensor, tensor_points};
use super::RegistrationError;
use crate::embedding::{glorot, PointEmbeddings};
use crate::geometry::Point3;

/// Two shared per-point affine layers (the "1-D convolutions") mapping a
/// point embedding to one logit per keypoint.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointHeadParams {
    pub w0: Tensor,
    pub b0: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub leaky_slope: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct KeypointHeadVars {
    pub w0: Var,
    pub b0: Var,
    pub w1: Var,
    pub b1: Var,
}

impl KeypointHeadVars {
    pub fn all(&self) -> [Var; 4] {
        [self.w0, self.b0, self.w1, self.b1]
    }
}

impl KeypointHeadParams {
    pub fn init(
        rng: &mut ChaCha8Rng,
        in_dim: usize,
        hidden: usize,
        keypoints: usize,
        leaky_slope: f64,
    ) -> Self {
        Self {
            w0: glorot(rng, in_dim, hidden),
            b0: Tensor::zeros(&[hidden]),
            w1: glorot(rng, hidden, keypoints),
            b1: Tensor::zeros(&[keypoints]),
            leaky_slope,
        }
    }

    pub fn keypoint_count(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("keypoint.layer0.W".into(), &self.w0),
            ("keypoint.layer0.b".into(), &self.b0),
            ("keypoint.layer1.W".into(), &self.w1),
            ("keypoint.layer1.b".into(), &self.b1),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w0, &mut self.b0, &mut self.w1, &mut self.b1]
    }

    pub fn leaves(&self, tape: &mut Tape) -> KeypointHeadVars {
        KeypointHeadVars {
            w0: tape.leaf(self.w0.clone()),
            b0: tape.leaf(self.b0.clone()),
            w1: tape.leaf(self.w1.clone()),
            b1: tape.leaf(self.b1.clone()),
        }
    }

    pub fn constants(&self, tape: &mut Tape) -> KeypointHeadVars {
        KeypointHeadVars {
            w0: tape.constant(self.w0.clone()),
            b0: tape.constant(self.b0.clone()),
            w1: tape.constant(self.w1.clone()),
            b1: tape.constant(self.b1.clone()),
        }
    }
}

/// `π`: `[M, A]`, each column a distribution over the `M` points.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointWeights(pub Tensor);

#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSet(pub Vec<Point3>);

impl KeypointSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.0
    }
}

/// Per-point keypoint logits, `[M, A]`.
pub fn keypoint_logits_var(
    tape: &mut Tape,
    head: &KeypointHeadVars,
    h: Var,
    slope: f64,
) -> Result<Var, TensorError> {
    let a = tape.matmul(h, head.w0)?;
    let a = tape.add(a, head.b0)?;
    let a = tape.leaky_relu(a, slope);
    let l = tape.matmul(a, head.w1)?;
    tape.add(l, head.b1)
}

/// Normalizes `logits` over the point axis and takes expectations of `coords`.
/// Returns `(π [M, A], keypoints [A, 3])`.
pub fn keypoints_from_logits_var(
    tape: &mut Tape,
    logits: Var,
    coords: Var,
) -> Result<(Var, Var), TensorError> {
    let pi = tape.softmax(logits, 0)?;
    let pit = tape.transpose(pi)?;
    let kp = tape.matmul(pit, coords)?;
    Ok((pi, kp))
}

pub fn keypoints_var(
    tape: &mut Tape,
    head: &KeypointHeadVars,
    h: Var,
    coords: Var,
    slope: f64,
) -> Result<(Var, Var), TensorError> {
    let logits = keypoint_logits_var(tape, head, h, slope)?;
    keypoints_from_logits_var(tape, logits, coords)
}

/// Keypoint distributions and positions for the points behind `h`.
pub fn predict_keypoints(
    h: &PointEmbeddings,
    head: &KeypointHeadParams,
    coords: &[Point3],
) -> Result<(KeypointWeights, KeypointSet), RegistrationError> {
    if coords.is_empty() {
        return Err(RegistrationError::NoPoints);
    }
    if coords.len() != h.values.nrows() {
        return Err(RegistrationError::PointCountMismatch {
            coords: coords.len(),
            embeddings: h.values.nrows(),
        });
    }
    let mut tape = Tape::new();
    let vars = head.constants(&mut tape);
    let hv = tape.constant(h.values.clone());
    let cv = tape.constant(points_tensor(coords));
    let (pi, kp) = keypoints_var(&mut tape, &vars, hv, cv, head.leaky_slope)?;
    Ok((
        KeypointWeights(tape.value(pi).clone()),
        KeypointSet(tensor_points(tape.value(kp))),
    ))
}
