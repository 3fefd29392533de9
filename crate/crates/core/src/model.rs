//! The three networks: backbone (feature extractor), source-identity
//! classifier, and camera discriminator, all small MLPs over the tape.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Layer widths of every network in one place.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub feature_dim: usize,
    pub backbone_hidden: Vec<usize>,
    pub embed_dim: usize,
    pub disc_hidden: usize,
    pub num_person_classes: usize,
    pub num_camera_classes: usize,
}

impl ModelDims {
    fn backbone_widths(&self) -> Vec<usize> {
        let mut v = vec![self.feature_dim];
        v.extend_from_slice(&self.backbone_hidden);
        v.push(self.embed_dim);
        v
    }

    fn discriminator_widths(&self) -> Vec<usize> {
        vec![self.embed_dim, self.disc_hidden, self.num_camera_classes]
    }

    fn classifier_widths(&self) -> Vec<usize> {
        vec![self.embed_dim, self.num_person_classes]
    }
}

/// Affine layers with ReLU between them; no activation after the last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub dims: Vec<usize>,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl Mlp {
    /// He-normal weights (variance `2 / fan_in`), zero biases.
    pub fn init(dims: &[usize], rng: &mut ChaCha8Rng) -> Result<Mlp> {
        if dims.len() < 2 {
            return Err(Error::InvalidConfig("mlp needs at least two widths".into()));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig(format!("zero-width layer in {dims:?}")));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let normal = StandardNormal;
        for win in dims.windows(2) {
            let (fan_in, fan_out) = (win[0], win[1]);
            let std = (2.0 / fan_in as f64).sqrt();
            let vals: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| {
                    let z: f64 = normal.sample(rng);
                    z * std
                })
                .collect();
            weights.push(Tensor::matrix(fan_in, fan_out, vals)?);
            biases.push(Tensor::vector(vec![0.0; fan_out]));
        }
        Ok(Mlp {
            dims: dims.to_vec(),
            weights,
            biases,
        })
    }

    pub fn input_dim(&self) -> usize {
        *self.dims.first().unwrap()
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// Parameter tensors in staging order: `w0, b0, w1, b1, ...`.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w as &mut Tensor, b as &mut Tensor])
            .collect()
    }

    /// Insert all parameters as tape leaves.
    pub fn stage(&self, tape: &mut Tape, trainable: bool) -> StagedMlp {
        let ids = self
            .tensors()
            .into_iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.input(t.clone())
                }
            })
            .collect();
        StagedMlp {
            ids,
            layers: self.weights.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.biases.len() || self.weights.len() + 1 != self.dims.len() {
            return Err(Error::Data("mlp layer bookkeeping is inconsistent".into()));
        }
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let (fan_in, fan_out) = (self.dims[i], self.dims[i + 1]);
            if w.shape() != [fan_in, fan_out] || b.shape() != [fan_out] {
                return Err(Error::Data(format!("mlp layer {i} shape mismatch")));
            }
            if !w.is_finite() || !b.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("mlp layer {i}"),
                });
            }
        }
        Ok(())
    }
}

/// Tape leaf ids of one staged network.
pub struct StagedMlp {
    ids: Vec<NodeId>,
    layers: usize,
}

impl StagedMlp {
    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    /// Affine -> ReLU chain; the last layer stays linear.
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for layer in 0..self.layers {
            let w = self.ids[2 * layer];
            let b = self.ids[2 * layer + 1];
            h = tape.matmul(h, w)?;
            h = tape.bias_add(h, b)?;
            if layer + 1 < self.layers {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub mlp: Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub mlp: Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub mlp: Mlp,
}

impl Backbone {
    /// Embeddings for a `batch x feature_dim` input, left on the tape.
    pub fn forward(&self, tape: &mut Tape, x: NodeId, trainable: bool) -> Result<(StagedMlp, NodeId)> {
        let features = tape.value(x);
        if features.shape().len() != 2 || features.cols() != self.mlp.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "forward_backbone",
                lhs: features.shape().to_vec(),
                rhs: vec![self.mlp.input_dim()],
            });
        }
        let staged = self.mlp.stage(tape, trainable);
        let out = staged.forward(tape, x)?;
        Ok((staged, out))
    }
}

impl Discriminator {
    /// Camera-class probabilities. With `grl_lambda` present the forward
    /// value is unchanged but gradients flowing back into `embeddings` are
    /// multiplied by `-grl_lambda`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        embeddings: NodeId,
        grl_lambda: Option<f64>,
        trainable: bool,
    ) -> Result<(StagedMlp, NodeId)> {
        if let Some(l) = grl_lambda {
            if l <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "grl coefficient must be positive, got {l}"
                )));
            }
        }
        let emb = tape.value(embeddings);
        if emb.shape().len() != 2 || emb.cols() != self.mlp.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "forward_discriminator",
                lhs: emb.shape().to_vec(),
                rhs: vec![self.mlp.input_dim()],
            });
        }
        let x = match grl_lambda {
            Some(l) => tape.grad_scale(embeddings, -l),
            None => embeddings,
        };
        let staged = self.mlp.stage(tape, trainable);
        let logits = staged.forward(tape, x)?;
        let probs = tape.softmax(logits)?;
        Ok((staged, probs))
    }
}

impl Classifier {
    /// Person-class probabilities.
    pub fn forward(
        &self,
        tape: &mut Tape,
        embeddings: NodeId,
        trainable: bool,
    ) -> Result<(StagedMlp, NodeId)> {
        let emb = tape.value(embeddings);
        if emb.shape().len() != 2 || emb.cols() != self.mlp.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "forward_classifier",
                lhs: emb.shape().to_vec(),
                rhs: vec![self.mlp.input_dim()],
            });
        }
        let staged = self.mlp.stage(tape, trainable);
        let logits = staged.forward(tape, embeddings)?;
        let probs = tape.softmax(logits)?;
        Ok((staged, probs))
    }
}

/// All three networks plus their dimension record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Models {
    pub dims: ModelDims,
    pub backbone: Backbone,
    pub classifier: Classifier,
    pub discriminator: Discriminator,
}

impl Models {
    /// Deterministic initialization; each network draws from its own stream.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Models> {
        let backbone = Backbone {
            mlp: Mlp::init(&dims.backbone_widths(), &mut rng::stream(seed, "init-backbone"))?,
        };
        let classifier = Classifier {
            mlp: Mlp::init(&dims.classifier_widths(), &mut rng::stream(seed, "init-classifier"))?,
        };
        let discriminator = Discriminator {
            mlp: Mlp::init(
                &dims.discriminator_widths(),
                &mut rng::stream(seed, "init-discriminator"),
            )?,
        };
        Ok(Models {
            dims,
            backbone,
            classifier,
            discriminator,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.mlp.validate()?;
        self.classifier.mlp.validate()?;
        self.discriminator.mlp.validate()
    }
}
