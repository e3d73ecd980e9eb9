//! Multilayer perceptron encoder producing embeddings, with an optional
//! linear classification head and an angular-margin head.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{self, DenseArray};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    None,
}

/// Architecture description: input width, hidden widths, embedding width.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub input_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    #[serde(default = "default_hidden_activation")]
    pub hidden_activation: Activation,
    /// The embedding layer itself is linear by default.
    #[serde(default = "default_output_activation")]
    pub output_activation: Activation,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

fn default_embedding_dim() -> usize {
    32
}

fn default_hidden_activation() -> Activation {
    Activation::Relu
}

fn default_output_activation() -> Activation {
    Activation::None
}

impl EncoderSpec {
    /// (input width, output width, activation) per layer, chained.
    pub fn layer_dims(&self) -> Vec<(usize, usize, Activation)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden {
            dims.push((prev, h, self.hidden_activation));
            prev = h;
        }
        dims.push((prev, self.embedding_dim, self.output_activation));
        dims
    }

    /// Stable identity string for transfer-compatibility checks. Covers the
    /// encoder body only, never the head.
    pub fn fingerprint(&self) -> String {
        let mut widths = vec![self.input_dim.to_string()];
        widths.extend(self.hidden.iter().map(|h| h.to_string()));
        widths.push(self.embedding_dim.to_string());
        format!(
            "mlp:{};hidden={:?};output={:?}",
            widths.join("-"),
            self.hidden_activation,
            self.output_activation
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidConfig {
                field: "encoder.input_dim",
                message: "must be positive".into(),
            });
        }
        if self.embedding_dim == 0 {
            return Err(Error::InvalidConfig {
                field: "encoder.embedding_dim",
                message: "must be positive".into(),
            });
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidConfig {
                field: "encoder.hidden",
                message: "widths must be positive".into(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct DenseLayer {
    weight: DenseArray,
    bias: DenseArray,
    activation: Activation,
}

#[derive(Clone, Debug)]
struct LinearHead {
    weight: DenseArray,
    bias: DenseArray,
}

/// Trainable embedding model. The optional head provides class logits for
/// cross-entropy training; metric losses run on raw embeddings.
#[derive(Clone, Debug)]
pub struct EncoderModel {
    spec: EncoderSpec,
    layers: Vec<DenseLayer>,
    head: Option<LinearHead>,
}

fn glorot_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> DenseArray {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| (2.0 * rng.gen::<f64>() - 1.0) * limit)
        .collect();
    DenseArray::matrix(fan_in, fan_out, data).expect("finite init")
}

impl EncoderModel {
    /// Glorot-uniform weights, zero biases, deterministic in the seed.
    pub fn init_random(spec: &EncoderSpec, head_classes: Option<usize>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with_rng(spec, head_classes, &mut rng)
    }

    pub fn init_with_rng(
        spec: &EncoderSpec,
        head_classes: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let layers = spec
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out, activation)| DenseLayer {
                weight: glorot_uniform(rng, fan_in, fan_out),
                bias: DenseArray::zeros(vec![fan_out]),
                activation,
            })
            .collect();
        let head = head_classes.map(|c| LinearHead {
            weight: glorot_uniform(rng, spec.embedding_dim, c),
            bias: DenseArray::zeros(vec![c]),
        });
        EncoderModel {
            spec: spec.clone(),
            layers,
            head,
        }
    }

    /// Build a model from explicit body parameters, validating every shape
    /// against the spec. Used when restoring from a checkpoint.
    pub fn with_parameters(
        spec: &EncoderSpec,
        body: Vec<(DenseArray, DenseArray)>,
        head: Option<(DenseArray, DenseArray)>,
    ) -> Result<Self> {
        let dims = spec.layer_dims();
        if body.len() != dims.len() {
            return Err(Error::TransferIncompatible {
                message: format!("expected {} layers, got {}", dims.len(), body.len()),
            });
        }
        let mut layers = Vec::with_capacity(body.len());
        for (i, ((w, b), (fan_in, fan_out, activation))) in
            body.into_iter().zip(dims).enumerate()
        {
            if w.shape() != [fan_in, fan_out] || b.shape() != [fan_out] {
                return Err(Error::TransferIncompatible {
                    message: format!(
                        "layer {i}: expected weight [{fan_in}, {fan_out}], got {:?}",
                        w.shape()
                    ),
                });
            }
            layers.push(DenseLayer {
                weight: w,
                bias: b,
                activation,
            });
        }
        let head = match head {
            Some((w, b)) => {
                let (d, c) = w.matrix_dims("head")?;
                if d != spec.embedding_dim || b.shape() != [c] {
                    return Err(Error::TransferIncompatible {
                        message: format!(
                            "head: expected weight [{}, c], got {:?}",
                            spec.embedding_dim,
                            w.shape()
                        ),
                    });
                }
                Some(LinearHead { weight: w, bias: b })
            }
            None => None,
        };
        Ok(EncoderModel {
            spec: spec.clone(),
            layers,
            head,
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn embedding_dim(&self) -> usize {
        self.spec.embedding_dim
    }

    pub fn has_head(&self) -> bool {
        self.head.is_some()
    }

    pub fn head_classes(&self) -> Option<usize> {
        self.head.as_ref().map(|h| h.weight.cols())
    }

    /// Map a batch (N x input_dim) to embeddings (N x d) without recording.
    /// Uses the same kernels as the tape path, so values are bitwise equal.
    pub fn embed(&self, batch: &DenseArray) -> Result<DenseArray> {
        let (_, cols) = batch.matrix_dims("embed")?;
        if cols != self.spec.input_dim {
            return Err(Error::ShapeMismatch {
                op: "embed",
                left: batch.shape().to_vec(),
                right: vec![self.spec.input_dim],
            });
        }
        let mut h = batch.clone();
        for layer in &self.layers {
            h = tensor::matmul(&h, &layer.weight)?;
            h = tensor::add_row_broadcast(&h, &layer.bias)?;
            if layer.activation == Activation::Relu {
                h = tensor::relu(&h)?;
            }
        }
        Ok(h)
    }

    /// Class logits W^T x + b per embedding row.
    pub fn logits(&self, embeddings: &DenseArray) -> Result<DenseArray> {
        let head = self.head.as_ref().ok_or(Error::MissingHead)?;
        let z = tensor::matmul(embeddings, &head.weight)?;
        tensor::add_row_broadcast(&z, &head.bias)
    }

    /// Register every parameter as a tape leaf, in [`Self::parameters`] order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.parameters()
            .into_iter()
            .map(|p| tape.leaf(p.clone()))
            .collect()
    }

    /// Differentiable embedding: `params` must come from [`Self::bind`].
    pub fn embed_on_tape(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = tape.matmul(h, params[2 * i])?;
            h = tape.add_row(h, params[2 * i + 1])?;
            if layer.activation == Activation::Relu {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Differentiable logits through the head leaves bound by [`Self::bind`].
    pub fn logits_on_tape(&self, tape: &mut Tape, params: &[Var], emb: Var) -> Result<Var> {
        if self.head.is_none() {
            return Err(Error::MissingHead);
        }
        let base = 2 * self.layers.len();
        let z = tape.matmul(emb, params[base])?;
        tape.add_row(z, params[base + 1])
    }

    /// All trainable parameters: per layer weight then bias, then head.
    pub fn parameters(&self) -> Vec<&DenseArray> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for layer in &self.layers {
            out.push(&layer.weight);
            out.push(&layer.bias);
        }
        if let Some(head) = &self.head {
            out.push(&head.weight);
            out.push(&head.bias);
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut DenseArray> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for layer in &mut self.layers {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        if let Some(head) = &mut self.head {
            out.push(&mut head.weight);
            out.push(&mut head.bias);
        }
        out
    }

    pub fn parameter_shapes(&self) -> Vec<Vec<usize>> {
        self.parameters()
            .iter()
            .map(|p| p.shape().to_vec())
            .collect()
    }

    /// Stable names for checkpoint serialization: `layerN.weight`,
    /// `layerN.bias`, then `head.weight`, `head.bias`.
    pub fn named_parameters(&self) -> Vec<(String, &DenseArray)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.weight"), &layer.weight));
            out.push((format!("layer{i}.bias"), &layer.bias));
        }
        if let Some(head) = &self.head {
            out.push(("head.weight".to_string(), &head.weight));
            out.push(("head.bias".to_string(), &head.bias));
        }
        out
    }

    /// Replace a layer's parameters. Intended for tests constructing exact
    /// models (identity weights and the like).
    pub fn set_layer(&mut self, index: usize, weight: DenseArray, bias: DenseArray) -> Result<()> {
        let layer = self
            .layers
            .get_mut(index)
            .ok_or(Error::RowOutOfBounds {
                index,
                rows: 0,
            })?;
        if weight.shape() != layer.weight.shape() || bias.shape() != layer.bias.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_layer",
                left: weight.shape().to_vec(),
                right: layer.weight.shape().to_vec(),
            });
        }
        layer.weight = weight;
        layer.bias = bias;
        Ok(())
    }

    pub fn set_head(&mut self, weight: DenseArray, bias: DenseArray) -> Result<()> {
        let d = self.spec.embedding_dim;
        let (wd, c) = weight.matrix_dims("set_head")?;
        if wd != d || bias.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "set_head",
                left: weight.shape().to_vec(),
                right: vec![d],
            });
        }
        self.head = Some(LinearHead { weight, bias });
        Ok(())
    }
}

/// Class-center weights for the angular-margin loss. No bias; columns are
/// l2-normalized inside the loss at every use.
#[derive(Clone, Debug)]
pub struct ArcfaceHead {
    pub weight: DenseArray,
    pub scale: f64,
    pub margin: f64,
}

impl ArcfaceHead {
    pub fn init_random(
        embedding_dim: usize,
        classes: usize,
        scale: f64,
        margin: f64,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with_rng(embedding_dim, classes, scale, margin, &mut rng)
    }

    pub fn init_with_rng(
        embedding_dim: usize,
        classes: usize,
        scale: f64,
        margin: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        ArcfaceHead {
            weight: glorot_uniform(rng, embedding_dim, classes),
            scale,
            margin,
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.cols()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn identity_spec(dim: usize) -> EncoderSpec {
        EncoderSpec {
            input_dim: dim,
            hidden: vec![],
            embedding_dim: dim,
            hidden_activation: Activation::Relu,
            output_activation: Activation::None,
        }
    }

    fn eye(n: usize) -> DenseArray {
        let mut m = DenseArray::zeros(vec![n, n]);
        for i in 0..n {
            m.data_mut()[i * n + i] = 1.0;
        }
        m
    }

    #[test]
    fn identity_layer_embeds_identically() {
        let spec = identity_spec(3);
        let mut model = EncoderModel::init_random(&spec, None, 0);
        model.set_layer(0, eye(3), DenseArray::zeros(vec![3])).unwrap();
        let x = DenseArray::matrix(2, 3, vec![0.5, -1.0, 2.0, 3.0, 0.0, -0.5]).unwrap();
        assert_eq!(model.embed(&x).unwrap().data(), x.data());
    }

    #[test]
    fn embed_shape_contract() {
        let spec = EncoderSpec {
            input_dim: 4,
            hidden: vec![8],
            embedding_dim: 5,
            hidden_activation: Activation::Relu,
            output_activation: Activation::None,
        };
        let model = EncoderModel::init_random(&spec, None, 7);
        let x = DenseArray::matrix(6, 4, (0..24).map(|i| i as f64 * 0.1).collect()).unwrap();
        let e = model.embed(&x).unwrap();
        assert_eq!(e.shape(), &[6, 5]);
    }

    #[test]
    fn duplicated_row_embeds_equally() {
        let spec = EncoderSpec {
            input_dim: 3,
            hidden: vec![4],
            embedding_dim: 2,
            hidden_activation: Activation::Relu,
            output_activation: Activation::None,
        };
        let model = EncoderModel::init_random(&spec, None, 3);
        let x = DenseArray::matrix(3, 3, vec![1.0, 2.0, 3.0, -0.5, 0.1, 0.9, 1.0, 2.0, 3.0])
            .unwrap();
        let e = model.embed(&x).unwrap();
        assert_eq!(e.row(0), e.row(2));
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let spec = identity_spec(4);
        let a = EncoderModel::init_random(&spec, Some(3), 42);
        let b = EncoderModel::init_random(&spec, Some(3), 42);
        for (pa, pb) in a.parameters().iter().zip(b.parameters().iter()) {
            assert_eq!(pa.data(), pb.data());
        }
        let c = EncoderModel::init_random(&spec, Some(3), 43);
        let differs = a
            .parameters()
            .iter()
            .zip(c.parameters().iter())
            .any(|(pa, pc)| pa.data() != pc.data());
        assert!(differs);
    }

    #[test]
    fn logits_identity_head() {
        let spec = identity_spec(3);
        let mut model = EncoderModel::init_random(&spec, Some(3), 0);
        model.set_head(eye(3), DenseArray::zeros(vec![3])).unwrap();
        let emb = DenseArray::matrix(2, 3, vec![0.1, 0.2, 0.3, -1.0, 0.0, 1.0]).unwrap();
        assert_eq!(model.logits(&emb).unwrap().data(), emb.data());
    }

    #[test]
    fn logits_zero_weight_unit_bias() {
        let spec = identity_spec(2);
        let mut model = EncoderModel::init_random(&spec, Some(4), 0);
        model
            .set_head(
                DenseArray::zeros(vec![2, 4]),
                DenseArray::vector(vec![1.0; 4]).unwrap(),
            )
            .unwrap();
        let emb = DenseArray::matrix(3, 2, vec![5.0, -2.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
        let l = model.logits(&emb).unwrap();
        assert!(l.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn logits_match_hand_matrix_multiply() {
        let spec = identity_spec(2);
        let mut model = EncoderModel::init_random(&spec, Some(3), 0);
        let w = DenseArray::matrix(2, 3, vec![0.5, -1.0, 2.0, 1.5, 0.25, -0.75]).unwrap();
        let b = DenseArray::vector(vec![0.1, -0.2, 0.3]).unwrap();
        model.set_head(w.clone(), b.clone()).unwrap();
        let emb = DenseArray::matrix(2, 2, vec![1.0, 2.0, -0.5, 0.4]).unwrap();
        let l = model.logits(&emb).unwrap();
        // Independent triple loop.
        for i in 0..2 {
            for j in 0..3 {
                let mut expect = b.data()[j];
                for k in 0..2 {
                    expect += emb.at(i, k) * w.at(k, j);
                }
                assert!((l.at(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn missing_head_is_configuration_error() {
        let model = EncoderModel::init_random(&identity_spec(2), None, 0);
        let emb = DenseArray::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(matches!(model.logits(&emb), Err(Error::MissingHead)));
    }

    #[test]
    fn tape_embed_matches_plain_embed() {
        let spec = EncoderSpec {
            input_dim: 3,
            hidden: vec![5],
            embedding_dim: 4,
            hidden_activation: Activation::Relu,
            output_activation: Activation::None,
        };
        let model = EncoderModel::init_random(&spec, None, 11);
        let x = DenseArray::matrix(4, 3, (0..12).map(|i| (i as f64).cos()).collect()).unwrap();
        let plain = model.embed(&x).unwrap();

        let mut tape = Tape::new();
        let params = model.bind(&mut tape);
        let xv = tape.leaf(x);
        let emb = model.embed_on_tape(&mut tape, &params, xv).unwrap();
        assert_eq!(tape.value(emb).data(), plain.data());
    }

    proptest! {
        // Permuting input rows permutes output rows identically.
        #[test]
        fn embed_is_permutation_equivariant(rows in 2usize..6, seed in 0u64..1000) {
            let spec = EncoderSpec {
                input_dim: 3,
                hidden: vec![4],
                embedding_dim: 2,
                hidden_activation: Activation::Relu,
                output_activation: Activation::None,
            };
            let model = EncoderModel::init_random(&spec, None, seed);
            let data: Vec<f64> = (0..rows * 3).map(|i| ((i as f64) * 0.7 + seed as f64).sin()).collect();
            let x = DenseArray::matrix(rows, 3, data).unwrap();
            let e = model.embed(&x).unwrap();

            // Reverse the rows as the permutation.
            let perm: Vec<usize> = (0..rows).rev().collect();
            let xp = crate::tensor::gather_rows(&x, &perm).unwrap();
            let ep = model.embed(&xp).unwrap();
            for (i, &src) in perm.iter().enumerate() {
                prop_assert_eq!(ep.row(i), e.row(src));
            }
        }
    }
}
