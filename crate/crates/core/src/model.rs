//! The complete learnable state: embedding stack, keypoint head and
//! (after joint initialization) the cluster centroids.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;
use tractjoint_autodiff::{Tape, Tensor, TensorError, Var};

use crate::embedding::{
    check_resampled, coords_tensor, embed_var, pool_var, EdgeChannels, EmbeddingConfig,
    EmbeddingError, EmbeddingParams, EmbeddingVars, PointEmbeddings, StreamlineEmbeddings,
};
use crate::geometry::Tractogram;
use crate::registration::keypoints::{keypoints_var, KeypointHeadParams, KeypointHeadVars};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("missing parameter `{0}`")]
    Missing(String),
    #[error("parameter `{name}` has shape {got:?}, expected {expected:?}")]
    Shape {
        name: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("malformed architecture record `{0}`")]
    Arch(String),
}

/// Architecture hyperparameters needed to rebuild a [`Model`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub embedding: EmbeddingConfig,
    pub keypoints: usize,
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embedding: EmbeddingConfig::default(),
            keypoints: 128,
            head_hidden: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub embedding: EmbeddingParams,
    pub head: KeypointHeadParams,
    /// `[K, 2D]` once clustering has been initialized.
    pub centroids: Option<Tensor>,
}

/// Tape handles for a [`Model`].
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub embedding: EmbeddingVars,
    pub head: KeypointHeadVars,
    pub centroids: Option<Var>,
}

impl ModelVars {
    /// Handles in the same order as [`Model::named_tensors`].
    pub fn all(&self) -> Vec<Var> {
        let mut v = self.embedding.all();
        v.extend(self.head.all());
        v.extend(self.centroids);
        v
    }
}

/// Everything one forward pass over a batch produces.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub coords: Var,
    /// `[N * N_p, D]`
    pub points: Var,
    /// `[N, 2D]`
    pub streamlines: Var,
    /// `[N * N_p, A]`
    pub weights: Var,
    /// `[A, 3]`
    pub keypoints: Var,
}

impl Model {
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = EmbeddingParams::init(config.embedding.clone(), &mut rng);
        let head = KeypointHeadParams::init(
            &mut rng,
            config.embedding.point_dim(),
            config.head_hidden,
            config.keypoints,
            config.embedding.leaky_slope,
        );
        Self {
            embedding,
            head,
            centroids: None,
        }
    }

    pub fn config(&self) -> &EmbeddingConfig {
        &self.embedding.config
    }

    pub fn n_points(&self) -> usize {
        self.embedding.config.n_points
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.embedding.named_tensors();
        v.extend(self.head.named_tensors());
        if let Some(c) = &self.centroids {
            v.push(("cluster.centroids".into(), c));
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.embedding.tensors_mut();
        v.extend(self.head.tensors_mut());
        if let Some(c) = &mut self.centroids {
            v.push(c);
        }
        v
    }

    pub fn leaves(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            embedding: self.embedding.leaves(tape),
            head: self.head.leaves(tape),
            centroids: self.centroids.as_ref().map(|c| tape.leaf(c.clone())),
        }
    }

    pub fn constants(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            embedding: EmbeddingVars {
                layers: self
                    .embedding
                    .layers
                    .iter()
                    .map(|l| (tape.constant(l.w.clone()), tape.constant(l.b.clone())))
                    .collect(),
            },
            head: self.head.constants(tape),
            centroids: self.centroids.as_ref().map(|c| tape.constant(c.clone())),
        }
    }

    /// Rebuilds handles from a flat list ordered like [`Model::named_tensors`].
    pub fn vars_from(&self, vars: &[Var]) -> ModelVars {
        let n = self.embedding.layers.len();
        let embedding = EmbeddingVars {
            layers: (0..n).map(|l| (vars[2 * l], vars[2 * l + 1])).collect(),
        };
        let h = &vars[2 * n..2 * n + 4];
        ModelVars {
            embedding,
            head: KeypointHeadVars {
                w0: h[0],
                b0: h[1],
                w1: h[2],
                b1: h[3],
            },
            centroids: self.centroids.as_ref().map(|_| vars[2 * n + 4]),
        }
    }

    /// Forward pass from a coordinate tensor `[N * N_p, 3]` already on the tape.
    pub fn forward_coords(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        coords: Var,
    ) -> Result<ForwardVars, EmbeddingError> {
        let points = embed_var(tape, &self.embedding.config, &vars.embedding, coords)?;
        let streamlines = pool_var(tape, points, self.n_points())?;
        let (weights, keypoints) =
            keypoints_var(tape, &vars.head, points, coords, self.head.leaky_slope)?;
        Ok(ForwardVars {
            coords,
            points,
            streamlines,
            weights,
            keypoints,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        t: &Tractogram,
    ) -> Result<ForwardVars, EmbeddingError> {
        check_resampled(t, self.n_points())?;
        let coords = tape.constant(coords_tensor(t));
        self.forward_coords(tape, vars, coords)
    }

    /// Point and streamline embeddings of `t` without recording gradients.
    pub fn embed(
        &self,
        t: &Tractogram,
    ) -> Result<(PointEmbeddings, StreamlineEmbeddings), EmbeddingError> {
        check_resampled(t, self.n_points())?;
        let mut tape = Tape::new();
        let vars = self.constants(&mut tape);
        let coords = tape.constant(coords_tensor(t));
        let h = embed_var(&mut tape, &self.embedding.config, &vars.embedding, coords)?;
        let z = pool_var(&mut tape, h, self.n_points())?;
        Ok((
            PointEmbeddings {
                n_points: self.n_points(),
                values: tape.value(h).clone(),
            },
            StreamlineEmbeddings(tape.value(z).clone()),
        ))
    }

    /// Scalar architecture settings stored next to the weights.
    pub fn arch_records(&self) -> Vec<(String, Tensor)> {
        let c = &self.embedding.config;
        vec![
            ("arch.n_points".into(), Tensor::scalar(c.n_points as f64)),
            ("arch.knn_k".into(), Tensor::scalar(c.k as f64)),
            ("arch.leaky_slope".into(), Tensor::scalar(c.leaky_slope)),
            (
                "arch.dynamic_graph".into(),
                Tensor::scalar(c.dynamic_graph as u8 as f64),
            ),
            (
                "arch.difference_only".into(),
                Tensor::scalar((c.channels == EdgeChannels::DifferenceOnly) as u8 as f64),
            ),
            ("arch.input_scale".into(), Tensor::scalar(c.input_scale)),
        ]
    }

    /// Rebuilds a model from named records (as written by [`Model::arch_records`]
    /// and [`Model::named_tensors`]).
    pub fn from_records(records: &[(String, Tensor)]) -> Result<Self, ModelError> {
        let find = |name: &str| {
            records
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| ModelError::Missing(name.to_string()))
        };
        let scalar = |name: &str| -> Result<f64, ModelError> {
            find(name)?
                .item()
                .ok_or_else(|| ModelError::Arch(name.to_string()))
        };
        let mut layers = Vec::new();
        let mut widths = Vec::new();
        while let Ok(w) = find(&format!("embed.layer{}.W", layers.len())) {
            let i = layers.len();
            let b = find(&format!("embed.layer{i}.b"))?;
            if w.ndim() != 2 || b.shape() != [w.shape()[1]] {
                return Err(ModelError::Shape {
                    name: format!("embed.layer{i}.b"),
                    got: b.shape().to_vec(),
                    expected: vec![w.shape().get(1).copied().unwrap_or(0)],
                });
            }
            widths.push(w.shape()[1]);
            layers.push(crate::embedding::EdgeConvParams {
                w: w.clone(),
                b: b.clone(),
            });
        }
        if layers.is_empty() {
            return Err(ModelError::Missing("embed.layer0.W".into()));
        }
        let config = EmbeddingConfig {
            n_points: scalar("arch.n_points")? as usize,
            widths,
            k: scalar("arch.knn_k")? as usize,
            leaky_slope: scalar("arch.leaky_slope")?,
            dynamic_graph: scalar("arch.dynamic_graph")? != 0.0,
            channels: if scalar("arch.difference_only")? != 0.0 {
                EdgeChannels::DifferenceOnly
            } else {
                EdgeChannels::Full
            },
            input_scale: scalar("arch.input_scale")?,
        };
        // Validate layer shapes against the configuration.
        for (l, layer) in layers.iter().enumerate() {
            let din = if l == 0 { 3 } else { config.widths[l - 1] };
            let rows = if l > 0 || config.channels == EdgeChannels::Full {
                2 * din
            } else {
                din
            };
            if layer.w.shape()[0] != rows {
                return Err(ModelError::Shape {
                    name: format!("embed.layer{l}.W"),
                    got: layer.w.shape().to_vec(),
                    expected: vec![rows, config.widths[l]],
                });
            }
        }
        let d = config.widths[config.widths.len() - 1];
        let w0 = find("keypoint.layer0.W")?.clone();
        let b0 = find("keypoint.layer0.b")?.clone();
        let w1 = find("keypoint.layer1.W")?.clone();
        let b1 = find("keypoint.layer1.b")?.clone();
        let shape_err = |name: &str, t: &Tensor, expected: Vec<usize>| ModelError::Shape {
            name: name.into(),
            got: t.shape().to_vec(),
            expected,
        };
        if w0.ndim() != 2 || w0.shape()[0] != d {
            return Err(shape_err("keypoint.layer0.W", &w0, vec![d, 0]));
        }
        let hidden = w0.shape()[1];
        if b0.shape() != [hidden] {
            return Err(shape_err("keypoint.layer0.b", &b0, vec![hidden]));
        }
        if w1.ndim() != 2 || w1.shape()[0] != hidden {
            return Err(shape_err("keypoint.layer1.W", &w1, vec![hidden, 0]));
        }
        if b1.shape() != [w1.shape()[1]] {
            return Err(shape_err("keypoint.layer1.b", &b1, vec![w1.shape()[1]]));
        }
        let centroids = records
            .iter()
            .find(|(n, _)| n == "cluster.centroids")
            .map(|(_, t)| t.clone());
        if let Some(c) = &centroids {
            if c.ndim() != 2 || c.shape()[1] != 2 * d {
                return Err(shape_err("cluster.centroids", c, vec![0, 2 * d]));
            }
        }
        Ok(Self {
            head: KeypointHeadParams {
                w0,
                b0,
                w1,
                b1,
                leaky_slope: config.leaky_slope,
            },
            embedding: EmbeddingParams { config, layers },
            centroids,
        })
    }

    pub fn to_records(&self) -> Vec<(String, Tensor)> {
        let mut r = self.arch_records();
        r.extend(
            self.named_tensors()
                .into_iter()
                .map(|(n, t)| (n, t.clone())),
        );
        r
    }
}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Arch(e.to_string())
    }
}
