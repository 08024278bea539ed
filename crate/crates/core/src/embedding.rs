//! Point-wise streamline embeddings from a stack of EdgeConv layers.
//!
//! Each streamline is its own graph: a k-nearest-neighbour graph over its
//! `N_p` points, built in coordinate space for the first layer and rebuilt
//! in feature space before every later layer when the graph is dynamic.
//! An EdgeConv layer maps every edge `(j, m)` to
//! `act(W [x_j ; x_m - x_j] + b)` and keeps the element-wise maximum over the
//! `k` edges of each point. Streamline embeddings concatenate the max and the
//! mean of the point embeddings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;
use tractjoint_autodiff::{Tape, Tensor, TensorError, Var};

use crate::geometry::Tractogram;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("k = {k} must be smaller than the number of points ({n_points})")]
    KTooLarge { k: usize, n_points: usize },
    #[error("streamlines must all have {expected} points")]
    NotResampled { expected: usize },
    #[error("tractogram is empty")]
    Empty,
    #[error("non-finite embedding parameters")]
    NonFinite,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which channels the first layer sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeChannels {
    /// `[x_j ; x_m - x_j]`
    Full,
    /// `x_m - x_j` only; makes the whole stack translation invariant.
    DifferenceOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingConfig {
    pub n_points: usize,
    pub widths: Vec<usize>,
    pub k: usize,
    pub leaky_slope: f64,
    pub dynamic_graph: bool,
    pub channels: EdgeChannels,
    /// Coordinates are multiplied by this before entering the first layer.
    pub input_scale: f64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            n_points: crate::geometry::DEFAULT_N_POINTS,
            widths: vec![32, 64, 64],
            k: 4,
            leaky_slope: 0.2,
            dynamic_graph: true,
            channels: EdgeChannels::Full,
            input_scale: 1.0,
        }
    }
}

impl EmbeddingConfig {
    pub fn point_dim(&self) -> usize {
        *self.widths.last().expect("at least one layer")
    }

    /// Width of the pooled streamline embedding (max ‖ mean).
    pub fn streamline_dim(&self) -> usize {
        2 * self.point_dim()
    }

    fn layer_in(&self, l: usize) -> usize {
        if l == 0 {
            3
        } else {
            self.widths[l - 1]
        }
    }

    fn has_center_channels(&self, l: usize) -> bool {
        l > 0 || self.channels == EdgeChannels::Full
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeConvParams {
    /// `[2 * d_in, d_out]`, or `[d_in, d_out]` for a difference-only layer.
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingParams {
    pub config: EmbeddingConfig,
    pub layers: Vec<EdgeConvParams>,
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub(crate) fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-a..a))
        .collect();
    Tensor::matrix(fan_in, fan_out, data).expect("shape")
}

impl EmbeddingParams {
    pub fn init(config: EmbeddingConfig, rng: &mut ChaCha8Rng) -> Self {
        let layers = (0..config.widths.len())
            .map(|l| {
                let din = config.layer_in(l);
                let rows = if config.has_center_channels(l) {
                    2 * din
                } else {
                    din
                };
                EdgeConvParams {
                    w: glorot(rng, rows, config.widths[l]),
                    b: Tensor::zeros(&[config.widths[l]]),
                }
            })
            .collect();
        Self { config, layers }
    }

    pub fn init_seeded(config: EmbeddingConfig, seed: u64) -> Self {
        Self::init(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.is_finite() && l.b.is_finite())
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("embed.layer{i}.W"), &l.w),
                    (format!("embed.layer{i}.b"), &l.b),
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.w, &mut l.b])
            .collect()
    }

    /// Puts every weight and bias on `tape` as a differentiable leaf.
    pub fn leaves(&self, tape: &mut Tape) -> EmbeddingVars {
        EmbeddingVars {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.leaf(l.w.clone()), tape.leaf(l.b.clone())))
                .collect(),
        }
    }
}

/// Tape handles for [`EmbeddingParams`].
#[derive(Clone, Debug)]
pub struct EmbeddingVars {
    pub layers: Vec<(Var, Var)>,
}

impl EmbeddingVars {
    pub fn all(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// Point-wise embeddings, `[N * N_p, D]`, streamline-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PointEmbeddings {
    pub n_points: usize,
    pub values: Tensor,
}

impl PointEmbeddings {
    pub fn n_streamlines(&self) -> usize {
        self.values.nrows() / self.n_points
    }

    pub fn dim(&self) -> usize {
        self.values.row_len()
    }

    /// `N_p x D` block of streamline `i`.
    pub fn streamline(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.values.data()[i * self.n_points * d..(i + 1) * self.n_points * d]
    }
}

/// Streamline embeddings `z`, `[N, 2D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamlineEmbeddings(pub Tensor);

/// k nearest neighbours of every row of `points` (`n x dim`, row-major),
/// excluding the row itself; ties go to the lower index.
pub fn knn_graph(points: &[f64], dim: usize, k: usize) -> Result<Vec<Vec<usize>>, EmbeddingError> {
    let n = points.len() / dim;
    if k >= n {
        return Err(EmbeddingError::KTooLarge { k, n_points: n });
    }
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut out = Vec::with_capacity(n);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for j in 0..n {
        cand.clear();
        let pj = row(j);
        for m in (0..n).filter(|&m| m != j) {
            let d: f64 = pj.iter().zip(row(m)).map(|(a, b)| (a - b) * (a - b)).sum();
            cand.push((d, m));
        }
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out.push(cand[..k].iter().map(|c| c.1).collect());
    }
    Ok(out)
}

/// Neighbour lists for a batch of equally sized blocks, flattened into
/// global `(center, neighbour)` row indices.
fn batch_edges(
    values: &Tensor,
    block: usize,
    k: usize,
) -> Result<(Vec<usize>, Vec<usize>), EmbeddingError> {
    let dim = values.row_len();
    let blocks = values.nrows() / block;
    let mut centers = Vec::with_capacity(values.nrows() * k);
    let mut neighbours = Vec::with_capacity(values.nrows() * k);
    for s in 0..blocks {
        let off = s * block;
        let pts = &values.data()[off * dim..(off + block) * dim];
        for (j, nb) in knn_graph(pts, dim, k)?.into_iter().enumerate() {
            for m in nb {
                centers.push(off + j);
                neighbours.push(off + m);
            }
        }
    }
    Ok((centers, neighbours))
}

/// One EdgeConv layer over precomputed edges.
///
/// `W [x_j ; x_m - x_j]` is evaluated as `x_j (W_c - W_d) + x_m W_d` so that
/// the matrix products run once per point instead of once per edge.
#[allow(clippy::too_many_arguments)]
pub fn edgeconv_layer(
    tape: &mut Tape,
    features: Var,
    centers: &[usize],
    neighbours: &[usize],
    k: usize,
    w: Var,
    b: Var,
    center_channels: bool,
    slope: f64,
) -> Result<Var, TensorError> {
    let p = tape.shape(features)[0];
    let din = tape.shape(features)[1];
    let dout = tape.shape(w)[1];
    let expected_rows = if center_channels { 2 * din } else { din };
    if tape.shape(w)[0] != expected_rows || centers.len() != p * k || neighbours.len() != p * k {
        return Err(TensorError::ShapeMismatch {
            op: "edgeconv",
            lhs: vec![p, din],
            rhs: tape.shape(w).to_vec(),
        });
    }
    let (u, v) = if center_channels {
        let top: Vec<usize> = (0..din).collect();
        let bottom: Vec<usize> = (din..2 * din).collect();
        let wc = tape.gather(w, &top)?;
        let wd = tape.gather(w, &bottom)?;
        let wcd = tape.sub(wc, wd)?;
        (tape.matmul(features, wcd)?, tape.matmul(features, wd)?)
    } else {
        let v = tape.matmul(features, w)?;
        (tape.scale(v, -1.0), v)
    };
    let ug = tape.gather(u, centers)?;
    let vg = tape.gather(v, neighbours)?;
    let e = tape.add(ug, vg)?;
    let e = tape.add(e, b)?;
    let a = tape.leaky_relu(e, slope);
    let r = tape.reshape(a, &[p, k, dout])?;
    tape.reduce_max(r, 1)
}

/// Runs the EdgeConv stack on `coords` (`[N * N_p, 3]`, streamline-major).
pub fn embed_var(
    tape: &mut Tape,
    config: &EmbeddingConfig,
    vars: &EmbeddingVars,
    coords: Var,
) -> Result<Var, EmbeddingError> {
    let np = config.n_points;
    if tape.shape(coords)[0] % np != 0 || tape.shape(coords)[0] == 0 {
        return Err(EmbeddingError::NotResampled { expected: np });
    }
    let mut x = if config.input_scale == 1.0 {
        coords
    } else {
        tape.scale(coords, config.input_scale)
    };
    let (mut centers, mut neighbours) = batch_edges(tape.value(coords), np, config.k)?;
    for (l, &(w, b)) in vars.layers.iter().enumerate() {
        if l > 0 && config.dynamic_graph {
            (centers, neighbours) = batch_edges(tape.value(x), np, config.k)?;
        }
        x = edgeconv_layer(
            tape,
            x,
            &centers,
            &neighbours,
            config.k,
            w,
            b,
            config.has_center_channels(l),
            config.leaky_slope,
        )?;
    }
    Ok(x)
}

/// Max ‖ mean pooling over each streamline's `n_points` rows of `h`.
pub fn pool_var(tape: &mut Tape, h: Var, n_points: usize) -> Result<Var, TensorError> {
    let (rows, d) = (tape.shape(h)[0], tape.shape(h)[1]);
    let r = tape.reshape(h, &[rows / n_points, n_points, d])?;
    let mx = tape.reduce_max(r, 1)?;
    let mn = tape.reduce_mean(r, 1)?;
    tape.concat(&[mx, mn], 1)
}

pub(crate) fn coords_tensor(t: &Tractogram) -> Tensor {
    let n = t.points().count();
    Tensor::matrix(n, 3, t.flat_coords()).expect("3 columns")
}

pub(crate) fn check_resampled(t: &Tractogram, np: usize) -> Result<(), EmbeddingError> {
    if t.is_empty() {
        return Err(EmbeddingError::Empty);
    }
    if t.streamlines().iter().any(|s| s.len() != np) {
        return Err(EmbeddingError::NotResampled { expected: np });
    }
    Ok(())
}

/// Point-wise embeddings of every streamline of `t`.
pub fn embed_points(
    t: &Tractogram,
    params: &EmbeddingParams,
) -> Result<PointEmbeddings, EmbeddingError> {
    check_resampled(t, params.config.n_points)?;
    if !params.is_finite() {
        return Err(EmbeddingError::NonFinite);
    }
    let mut tape = Tape::new();
    let vars = EmbeddingVars {
        layers: params
            .layers
            .iter()
            .map(|l| (tape.constant(l.w.clone()), tape.constant(l.b.clone())))
            .collect(),
    };
    let coords = tape.constant(coords_tensor(t));
    let h = embed_var(&mut tape, &params.config, &vars, coords)?;
    Ok(PointEmbeddings {
        n_points: params.config.n_points,
        values: tape.value(h).clone(),
    })
}

/// Streamline embeddings `z_i = [max_k h_ik ; mean_k h_ik]`.
pub fn pool_streamline(h: &PointEmbeddings) -> StreamlineEmbeddings {
    let (n, np, d) = (h.n_streamlines(), h.n_points, h.dim());
    let mut out = Vec::with_capacity(n * 2 * d);
    for i in 0..n {
        let block = h.streamline(i);
        let mut mx = vec![f64::NEG_INFINITY; d];
        let mut mean = vec![0.0; d];
        for row in block.chunks(d) {
            for c in 0..d {
                mx[c] = mx[c].max(row[c]);
                mean[c] += row[c];
            }
        }
        mean.iter_mut().for_each(|v| *v /= np as f64);
        out.extend(mx);
        out.extend(mean);
    }
    StreamlineEmbeddings(Tensor::matrix(n, 2 * d, out).expect("shape"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collinear_interior_point_sees_adjacent_points() {
        let pts: Vec<f64> = (0..5).flat_map(|i| [i as f64, 0.0, 0.0]).collect();
        let g = knn_graph(&pts, 3, 2).unwrap();
        assert_eq!(g[2], vec![1, 3]);
        assert_eq!(g[0], vec![1, 2]);
    }

    #[test]
    fn nearest_in_345_triangle() {
        // A-B = 3, A-C = 4, B-C = 5
        let pts = [0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 4.0, 0.0];
        let g = knn_graph(&pts, 3, 1).unwrap();
        assert_eq!(g, vec![vec![1], vec![0], vec![0]]);
    }

    #[test]
    fn k_must_be_below_point_count() {
        let pts = [0.0; 9];
        assert!(matches!(
            knn_graph(&pts, 3, 3),
            Err(EmbeddingError::KTooLarge { .. })
        ));
    }

    #[test]
    fn knn_ties_go_to_lower_index() {
        let pts = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, -1.0, 0.0, 0.0];
        assert_eq!(knn_graph(&pts, 3, 1).unwrap()[0], vec![1]);
    }
}
