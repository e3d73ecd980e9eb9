//! The meta-iteration engine: fine-tune, predict pseudo-labels, select the
//! most confident, promote, retrain. Supports warm starts, cold restarts,
//! and checkpoint-based transfer from a pretrained source model.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMetadata};
use crate::data::Dataset;
use crate::encoder::{ArcfaceHead, EncoderModel, EncoderSpec};
use crate::error::{Error, Result};
use crate::losses::{self, LossConfig, LossKind};
use crate::mining::{self, FallbackPolicy};
use crate::optim::{Optimizer, OptimizerKind, OptimizerSettings};
use crate::propagation::{self, DataPools, LabeledExample, Origin, ScoredPrediction};
use crate::tape::Tape;
use crate::tensor::DenseArray;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrainMode {
    /// Continue training the current model each meta-iteration.
    #[default]
    Warm,
    /// Reinitialize from the configured scheme before each retraining.
    Cold,
}

/// Which labeled examples serve as the kNN reference set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnnReference {
    /// Seed and pseudo-labeled examples alike.
    #[default]
    All,
    /// Seed labels only.
    SeedOnly,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Initialization {
    #[default]
    Random,
    Checkpoint(PathBuf),
}

/// Everything one run needs: loss, architecture, optimizer choice, loop
/// lengths, selection fraction, and seeding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub loss: LossConfig,
    pub encoder: EncoderSpec,
    /// None applies the dispatch rule: RMSprop for contrastive, Adam
    /// otherwise.
    #[serde(default)]
    pub optimizer: Option<OptimizerKind>,
    /// Learning-rate override; None keeps the optimizer default of 1e-3.
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_meta_iterations")]
    pub meta_iterations: usize,
    #[serde(default = "default_selection_fraction")]
    pub selection_fraction: f64,
    #[serde(default = "default_knn_k")]
    pub knn_k: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub init: Initialization,
    #[serde(default)]
    pub retrain_mode: RetrainMode,
    #[serde(default)]
    pub class_balanced_selection: bool,
    #[serde(default)]
    pub knn_reference: KnnReference,
    #[serde(default)]
    pub mining_fallback: FallbackPolicy,
}

fn default_batch_size() -> usize {
    100
}

fn default_epochs() -> usize {
    20
}

fn default_meta_iterations() -> usize {
    25
}

fn default_selection_fraction() -> f64 {
    0.05
}

fn default_knn_k() -> usize {
    1
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.encoder.validate()?;
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig {
                field: "batch_size",
                message: "must be at least 2".into(),
            });
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig {
                field: "epochs",
                message: "must be at least 1".into(),
            });
        }
        if !(self.selection_fraction > 0.0 && self.selection_fraction <= 1.0) {
            return Err(Error::InvalidSelectionFraction {
                p: self.selection_fraction,
            });
        }
        if self.knn_k == 0 {
            return Err(Error::InvalidConfig {
                field: "knn_k",
                message: "must be at least 1".into(),
            });
        }
        Ok(())
    }

    /// Optimizer dispatch: contrastive trains with RMSprop, everything else
    /// with Adam, unless explicitly overridden.
    pub fn optimizer_kind(&self) -> OptimizerKind {
        self.optimizer.unwrap_or(match self.loss.kind {
            LossKind::Contrastive => OptimizerKind::Rmsprop,
            _ => OptimizerKind::Adam,
        })
    }

    pub fn optimizer_settings(&self) -> OptimizerSettings {
        let mut settings = OptimizerSettings::default();
        if let Some(lr) = self.learning_rate {
            settings.learning_rate = lr;
        }
        settings
    }

    pub fn build_optimizer(&self, shapes: &[Vec<usize>]) -> Optimizer {
        Optimizer::with_settings(self.optimizer_kind(), shapes, self.optimizer_settings())
    }
}

/// Encoder plus the loss-specific trainable head, updated as one parameter
/// group.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub encoder: EncoderModel,
    pub arcface: Option<ArcfaceHead>,
}

impl TrainedModel {
    pub fn parameter_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = self.encoder.parameter_shapes();
        if let Some(head) = &self.arcface {
            shapes.push(head.weight.shape().to_vec());
        }
        shapes
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut DenseArray> {
        let mut params = self.encoder.parameters_mut();
        if let Some(head) = &mut self.arcface {
            params.push(&mut head.weight);
        }
        params
    }

    pub fn named_parameters(&self) -> Vec<(String, &DenseArray)> {
        let mut named = self.encoder.named_parameters();
        if let Some(head) = &self.arcface {
            named.push(("arcface.weight".to_string(), &head.weight));
        }
        named
    }
}

/// One row of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaIterationReport {
    pub iteration: usize,
    pub labeled_count: usize,
    pub selected_count: usize,
    pub mean_confidence: Option<f64>,
    pub selected_pseudo_accuracy: Option<f64>,
    pub train_loss: f64,
    pub test_accuracy: f64,
}

/// Final model, per-iteration reports, and the pools as the run left them.
#[derive(Debug)]
pub struct SelfLearnOutcome {
    pub model: TrainedModel,
    pub reports: Vec<MetaIterationReport>,
    pub pools: DataPools,
}

/// Per-call training summary; `final_loss` is the mean batch loss of the
/// last epoch (0.0 when no epochs ran).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSummary {
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
}

fn build_random_model(
    config: &ExperimentConfig,
    classes: usize,
    rng: &mut ChaCha8Rng,
) -> TrainedModel {
    let head_classes = (config.loss.kind == LossKind::CrossEntropy).then_some(classes);
    let encoder = EncoderModel::init_with_rng(&config.encoder, head_classes, rng);
    let arcface = (config.loss.kind == LossKind::Arcface).then(|| {
        ArcfaceHead::init_with_rng(
            config.encoder.embedding_dim,
            classes,
            config.loss.scale(),
            config.loss.margin(),
            rng,
        )
    });
    TrainedModel { encoder, arcface }
}

/// Initialize a model for `config`: fresh random parameters, or a checkpoint
/// body with a freshly seeded head.
pub fn initialize_model(
    config: &ExperimentConfig,
    classes: usize,
    checkpoint: Option<&Checkpoint>,
    rng: &mut ChaCha8Rng,
) -> Result<TrainedModel> {
    match (&config.init, checkpoint) {
        (Initialization::Random, _) => Ok(build_random_model(config, classes, rng)),
        (Initialization::Checkpoint(_), Some(ckpt)) => {
            let head_classes = (config.loss.kind == LossKind::CrossEntropy).then_some(classes);
            let encoder = fine_tune_body(ckpt, &config.encoder, head_classes, rng)?;
            let arcface = (config.loss.kind == LossKind::Arcface).then(|| {
                ArcfaceHead::init_with_rng(
                    config.encoder.embedding_dim,
                    classes,
                    config.loss.scale(),
                    config.loss.margin(),
                    rng,
                )
            });
            Ok(TrainedModel { encoder, arcface })
        }
        (Initialization::Checkpoint(path), None) => {
            let ckpt = Checkpoint::load(path)?;
            initialize_model(config, classes, Some(&ckpt), rng)
        }
    }
}

/// Load checkpoint body parameters into a model matching `spec`; the head
/// (if any) is freshly initialized and every parameter stays trainable.
pub fn fine_tune_from(
    checkpoint: &Checkpoint,
    spec: &EncoderSpec,
    head_classes: Option<usize>,
    seed: u64,
) -> Result<EncoderModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fine_tune_body(checkpoint, spec, head_classes, &mut rng)
}

const FRESH_HEAD_SCALE: f64 = 0.01;

fn fine_tune_body(
    checkpoint: &Checkpoint,
    spec: &EncoderSpec,
    head_classes: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<EncoderModel> {
    if checkpoint.metadata.encoder_fingerprint != spec.fingerprint() {
        return Err(Error::TransferIncompatible {
            message: format!(
                "checkpoint body is `{}`, target expects `{}`",
                checkpoint.metadata.encoder_fingerprint,
                spec.fingerprint()
            ),
        });
    }
    let layer_count = spec.layer_dims().len();
    let mut body = Vec::with_capacity(layer_count);
    for i in 0..layer_count {
        let weight = checkpoint
            .get(&format!("layer{i}.weight"))
            .ok_or_else(|| Error::TransferIncompatible {
                message: format!("checkpoint is missing layer{i}.weight"),
            })?
            .clone();
        let bias = checkpoint
            .get(&format!("layer{i}.bias"))
            .ok_or_else(|| Error::TransferIncompatible {
                message: format!("checkpoint is missing layer{i}.bias"),
            })?
            .clone();
        body.push((weight, bias));
    }
    let fresh = EncoderModel::init_with_rng(spec, head_classes, rng);
    let head = head_classes.map(|_| {
        let named = fresh.named_parameters();
        // The fresh head starts near zero so its first gradients cannot
        // wreck the transferred body; the seeded draw keeps it
        // seed-dependent.
        let w = named
            .iter()
            .find(|(n, _)| n == "head.weight")
            .map(|(_, a)| crate::tensor::scale(a, FRESH_HEAD_SCALE).expect("finite head"))
            .expect("fresh head");
        let b = named
            .iter()
            .find(|(n, _)| n == "head.bias")
            .map(|(_, a)| (*a).clone())
            .expect("fresh head");
        (w, b)
    });
    EncoderModel::with_parameters(spec, body, head)
}

fn batch_features(examples: &[&LabeledExample]) -> Result<DenseArray> {
    DenseArray::from_rows(
        &examples
            .iter()
            .map(|e| e.features.clone())
            .collect::<Vec<_>>(),
    )
}

/// One optimizer step on one mini-batch. Returns the batch loss, or None if
/// mining produced nothing usable.
fn train_step(
    model: &mut TrainedModel,
    optimizer: &mut Optimizer,
    batch: &[&LabeledExample],
    config: &ExperimentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Option<f64>> {
    let features = batch_features(batch)?;
    let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();

    let mut tape = Tape::new();
    let mut param_vars = model.encoder.bind(&mut tape);
    let arcface_var = model.arcface.as_ref().map(|h| tape.leaf(h.weight.clone()));
    if let Some(v) = arcface_var {
        param_vars.push(v);
    }
    let x = tape.leaf(features);
    let encoder_vars = &param_vars[..param_vars.len() - arcface_var.iter().len()];
    let emb = model.encoder.embed_on_tape(&mut tape, encoder_vars, x)?;

    let loss_var = match config.loss.kind {
        LossKind::CrossEntropy => {
            let logits = model
                .encoder
                .logits_on_tape(&mut tape, encoder_vars, emb)?;
            losses::cross_entropy_graph(&mut tape, logits, &labels)?
        }
        LossKind::Triplet => {
            let emb = if config.loss.normalize_embeddings {
                tape.l2_normalize_rows(emb)?
            } else {
                emb
            };
            let mined = mining::mine_semi_hard(
                tape.value(emb),
                &labels,
                config.loss.margin(),
                config.mining_fallback,
            )?;
            if mined.triplets.is_empty() {
                return Ok(None);
            }
            let anchors: Vec<usize> = mined.triplets.iter().map(|t| t.anchor).collect();
            let positives: Vec<usize> = mined.triplets.iter().map(|t| t.positive).collect();
            let negatives: Vec<usize> = mined.triplets.iter().map(|t| t.negative).collect();
            let a = tape.gather_rows(emb, &anchors)?;
            let p = tape.gather_rows(emb, &positives)?;
            let n = tape.gather_rows(emb, &negatives)?;
            losses::triplet_graph(&mut tape, a, p, n, config.loss.margin())?
        }
        LossKind::Contrastive => {
            let emb = if config.loss.normalize_embeddings {
                tape.l2_normalize_rows(emb)?
            } else {
                emb
            };
            let mined = mining::mine_pairs(&labels, rng.gen());
            if mined.pairs.is_empty() {
                return Ok(None);
            }
            let firsts: Vec<usize> = mined.pairs.iter().map(|p| p.first).collect();
            let seconds: Vec<usize> = mined.pairs.iter().map(|p| p.second).collect();
            let flags: Vec<u8> = mined.pairs.iter().map(|p| p.similar).collect();
            let x1 = tape.gather_rows(emb, &firsts)?;
            let x2 = tape.gather_rows(emb, &seconds)?;
            losses::contrastive_graph(&mut tape, x1, x2, &flags, config.loss.margin())?
        }
        LossKind::Arcface => {
            let head = model.arcface.as_ref().ok_or(Error::MissingHead)?;
            let centers = arcface_var.expect("bound above");
            losses::arcface_graph(&mut tape, emb, &labels, centers, head.scale, head.margin)?
        }
    };

    let loss = tape.value(loss_var).as_scalar().expect("scalar loss");
    let grads = tape.backward(loss_var)?;
    let grad_arrays: Vec<DenseArray> = param_vars.iter().map(|&v| grads.get(v)).collect();
    let mut params = model.parameters_mut();
    optimizer.apply_update(&mut params, &grad_arrays)?;
    Ok(Some(loss))
}

/// Run `epochs` of seeded mini-batch training over the labeled pool. An
/// entire epoch with zero usable triplets/pairs escalates to an error.
pub fn train_supervised(
    model: &mut TrainedModel,
    optimizer: &mut Optimizer,
    labeled: &[LabeledExample],
    config: &ExperimentConfig,
    epochs: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingSummary> {
    if labeled.is_empty() {
        return Err(Error::EmptyLabeledPool);
    }
    let mut epoch_losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..labeled.len()).collect();
        order.shuffle(rng);
        let mut usable = 0usize;
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&LabeledExample> = chunk.iter().map(|&i| &labeled[i]).collect();
            if let Some(loss) = train_step(model, optimizer, &batch, config, rng)? {
                usable += 1;
                loss_sum += loss;
            }
        }
        if usable == 0 {
            return Err(Error::NoUsableBatches { epoch });
        }
        epoch_losses.push(loss_sum / usable as f64);
    }
    Ok(TrainingSummary {
        final_loss: epoch_losses.last().copied().unwrap_or(0.0),
        epoch_losses,
    })
}

fn reference_examples(
    pools: &DataPools,
    reference: KnnReference,
) -> Vec<&LabeledExample> {
    pools
        .labeled
        .iter()
        .filter(|e| reference == KnnReference::All || e.origin == Origin::Seed)
        .collect()
}

/// Accuracy on a feature/label set: argmax over head logits for
/// cross-entropy models, k-nearest-neighbor in embedding space otherwise.
pub fn evaluate_accuracy(
    model: &TrainedModel,
    config: &ExperimentConfig,
    pools: &DataPools,
    features: &DenseArray,
    labels: &[usize],
) -> Result<f64> {
    let predicted = predict_labels(model, config, pools, features)?;
    let correct = predicted
        .iter()
        .zip(labels)
        .filter(|(p, &l)| p.label == l)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

fn predict_labels(
    model: &TrainedModel,
    config: &ExperimentConfig,
    pools: &DataPools,
    features: &DenseArray,
) -> Result<Vec<ScoredPrediction>> {
    match config.loss.kind {
        LossKind::CrossEntropy => {
            let emb = model.encoder.embed(features)?;
            let logits = model.encoder.logits(&emb)?;
            propagation::softmax_predict(&logits)
        }
        _ => {
            let reference = reference_examples(pools, config.knn_reference);
            if reference.is_empty() {
                return Err(Error::EmptyLabeledPool);
            }
            let ref_features = batch_features(&reference)?;
            let ref_labels: Vec<usize> = reference.iter().map(|e| e.label).collect();
            let ref_emb = model.encoder.embed(&ref_features)?;
            let query_emb = model.encoder.embed(features)?;
            let k = config.knn_k.min(ref_labels.len());
            propagation::knn_predict(&ref_emb, &ref_labels, &query_emb, k)
        }
    }
}

fn test_accuracy(
    model: &TrainedModel,
    config: &ExperimentConfig,
    pools: &DataPools,
) -> Result<f64> {
    let features = pools.test_features()?;
    let labels = pools.test_labels();
    evaluate_accuracy(model, config, pools, &features, &labels)
}

/// The full self-learning loop. Emits the iteration-0 report for the
/// initial supervised phase, then one report per completed meta-iteration:
/// predict, select, promote, retrain. Stops early once the unlabeled pool
/// is empty.
pub fn run_self_learning(config: &ExperimentConfig, pools: DataPools) -> Result<SelfLearnOutcome> {
    config.validate()?;
    let mut pools = pools;
    if pools.labeled.is_empty() {
        return Err(Error::EmptyLabeledPool);
    }
    if pools.labeled[0].features.len() != config.encoder.input_dim {
        return Err(Error::ShapeMismatch {
            op: "run_self_learning",
            left: vec![pools.labeled[0].features.len()],
            right: vec![config.encoder.input_dim],
        });
    }

    let checkpoint = match &config.init {
        Initialization::Checkpoint(path) => Some(Checkpoint::load(path)?),
        Initialization::Random => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = initialize_model(config, pools.classes, checkpoint.as_ref(), &mut rng)?;
    let mut optimizer = config.build_optimizer(&model.parameter_shapes());

    let summary = train_supervised(
        &mut model,
        &mut optimizer,
        &pools.labeled,
        config,
        config.epochs,
        &mut rng,
    )?;
    let mut reports = vec![MetaIterationReport {
        iteration: 0,
        labeled_count: pools.labeled.len(),
        selected_count: 0,
        mean_confidence: None,
        selected_pseudo_accuracy: None,
        train_loss: summary.final_loss,
        test_accuracy: test_accuracy(&model, config, &pools)?,
    }];

    for iteration in 1..=config.meta_iterations {
        if pools.unlabeled.is_empty() {
            break;
        }

        let unlabeled_features = pools.unlabeled_features()?;
        let predictions = predict_labels(&model, config, &pools, &unlabeled_features)?;
        let selected = if config.class_balanced_selection {
            propagation::select_top_class_balanced(
                &predictions,
                config.selection_fraction,
                pools.classes,
            )?
        } else {
            propagation::select_top(&predictions, config.selection_fraction)?
        };

        let mean_confidence = if selected.is_empty() {
            None
        } else {
            Some(selected.iter().map(|s| s.confidence).sum::<f64>() / selected.len() as f64)
        };
        let audited: Vec<(usize, usize)> = selected
            .iter()
            .filter_map(|s| pools.unlabeled[s.index].audit_label.map(|t| (s.label, t)))
            .collect();
        let selected_pseudo_accuracy = if audited.is_empty() {
            None
        } else {
            Some(
                audited.iter().filter(|(p, t)| p == t).count() as f64 / audited.len() as f64,
            )
        };

        propagation::promote(&mut pools, &selected)?;

        if config.retrain_mode == RetrainMode::Cold {
            let mut cold_rng = ChaCha8Rng::seed_from_u64(config.seed);
            model = initialize_model(config, pools.classes, checkpoint.as_ref(), &mut cold_rng)?;
            optimizer = config.build_optimizer(&model.parameter_shapes());
        }
        let summary = train_supervised(
            &mut model,
            &mut optimizer,
            &pools.labeled,
            config,
            config.epochs,
            &mut rng,
        )?;

        reports.push(MetaIterationReport {
            iteration,
            labeled_count: pools.labeled.len(),
            selected_count: selected.len(),
            mean_confidence,
            selected_pseudo_accuracy,
            train_loss: summary.final_loss,
            test_accuracy: test_accuracy(&model, config, &pools)?,
        });
    }

    Ok(SelfLearnOutcome {
        model,
        reports,
        pools,
    })
}

/// Supervised training on a fully labeled source dataset; returns the model
/// and a checkpoint carrying its parameters and provenance.
pub fn pretrain_source(
    dataset: &Dataset,
    config: &ExperimentConfig,
    source_task: &str,
) -> Result<(TrainedModel, Checkpoint)> {
    config.validate()?;
    if dataset.feature_dim != config.encoder.input_dim {
        return Err(Error::ShapeMismatch {
            op: "pretrain_source",
            left: vec![dataset.feature_dim],
            right: vec![config.encoder.input_dim],
        });
    }
    let labeled: Vec<LabeledExample> = dataset
        .features
        .iter()
        .zip(&dataset.labels)
        .map(|(f, &l)| LabeledExample {
            features: f.clone(),
            label: l,
            origin: Origin::Seed,
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = build_random_model(config, dataset.classes, &mut rng);
    let mut optimizer = config.build_optimizer(&model.parameter_shapes());
    train_supervised(
        &mut model,
        &mut optimizer,
        &labeled,
        config,
        config.epochs,
        &mut rng,
    )?;

    let parameters = model
        .named_parameters()
        .into_iter()
        .map(|(n, a)| (n, a.clone()))
        .collect();
    let checkpoint = Checkpoint::new(
        parameters,
        CheckpointMetadata {
            encoder_fingerprint: config.encoder.fingerprint(),
            source_task: source_task.to_string(),
            seed: config.seed,
            epochs: config.epochs,
            loss: config.loss.kind,
        },
    );
    Ok((model, checkpoint))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, split_ssl, DatasetKind, DatasetSpec, SplitSpec};
    use crate::encoder::Activation;
    use crate::propagation::UnlabeledExample;

    fn small_encoder() -> EncoderSpec {
        EncoderSpec {
            input_dim: 2,
            hidden: vec![16],
            embedding_dim: 8,
            hidden_activation: Activation::Relu,
            output_activation: Activation::None,
        }
    }

    fn config(kind: LossKind) -> ExperimentConfig {
        ExperimentConfig {
            loss: LossConfig::new(kind),
            encoder: small_encoder(),
            optimizer: None,
            learning_rate: None,
            batch_size: 32,
            epochs: 10,
            meta_iterations: 0,
            selection_fraction: 0.05,
            knn_k: 1,
            seed: 7,
            init: Initialization::Random,
            retrain_mode: RetrainMode::Warm,
            class_balanced_selection: false,
            knn_reference: KnnReference::All,
            mining_fallback: FallbackPolicy::NearestToWindow,
        }
    }

    fn blob_pools(noise: f64, per_class: usize, labels_per_class: usize, seed: u64) -> DataPools {
        let spec = DatasetSpec {
            kind: DatasetKind::GaussianBlobs,
            classes: 2,
            samples_per_class: per_class,
            noise,
            rotation_degrees: 0.0,
            seed,
            images_path: None,
            labels_path: None,
        };
        let ds = generate(&spec).unwrap();
        split_ssl(
            &ds,
            &SplitSpec {
                labels_per_class,
                test_fraction: 0.2,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn cross_entropy_loss_descends_on_blobs() {
        let cfg = config(LossKind::CrossEntropy);
        let pools = blob_pools(0.6, 30, 10, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut model = build_random_model(&cfg, pools.classes, &mut rng);
        let mut optimizer = Optimizer::new(cfg.optimizer_kind(), &model.parameter_shapes());
        let summary = train_supervised(
            &mut model,
            &mut optimizer,
            &pools.labeled,
            &cfg,
            10,
            &mut rng,
        )
        .unwrap();
        assert!(
            summary.epoch_losses.last().unwrap() < summary.epoch_losses.first().unwrap(),
            "losses: {:?}",
            summary.epoch_losses
        );
    }

    #[test]
    fn zero_epochs_leaves_model_unchanged() {
        let cfg = config(LossKind::CrossEntropy);
        let pools = blob_pools(0.5, 10, 4, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut model = build_random_model(&cfg, pools.classes, &mut rng);
        let before: Vec<Vec<f64>> = model
            .named_parameters()
            .iter()
            .map(|(_, a)| a.data().to_vec())
            .collect();
        let mut optimizer = Optimizer::new(cfg.optimizer_kind(), &model.parameter_shapes());
        let summary =
            train_supervised(&mut model, &mut optimizer, &pools.labeled, &cfg, 0, &mut rng)
                .unwrap();
        assert_eq!(summary.final_loss, 0.0);
        let after: Vec<Vec<f64>> = model
            .named_parameters()
            .iter()
            .map(|(_, a)| a.data().to_vec())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn training_is_deterministic_in_seed() {
        for kind in [
            LossKind::CrossEntropy,
            LossKind::Triplet,
            LossKind::Contrastive,
            LossKind::Arcface,
        ] {
            let cfg = config(kind);
            let run = || {
                let pools = blob_pools(0.5, 15, 5, 2);
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                let mut model = build_random_model(&cfg, pools.classes, &mut rng);
                let mut optimizer =
                    Optimizer::new(cfg.optimizer_kind(), &model.parameter_shapes());
                train_supervised(&mut model, &mut optimizer, &pools.labeled, &cfg, 5, &mut rng)
                    .unwrap();
                model
                    .named_parameters()
                    .iter()
                    .map(|(_, a)| a.data().to_vec())
                    .collect::<Vec<_>>()
            };
            assert_eq!(run(), run(), "loss kind {kind:?} not deterministic");
        }
    }

    #[test]
    fn triplet_single_class_pool_escalates() {
        let cfg = config(LossKind::Triplet);
        let labeled: Vec<LabeledExample> = (0..6)
            .map(|i| LabeledExample {
                features: vec![i as f64, 0.0],
                label: 0,
                origin: Origin::Seed,
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = build_random_model(&cfg, 2, &mut rng);
        let mut optimizer = Optimizer::new(cfg.optimizer_kind(), &model.parameter_shapes());
        let err = train_supervised(&mut model, &mut optimizer, &labeled, &cfg, 2, &mut rng);
        assert!(matches!(err, Err(Error::NoUsableBatches { epoch: 0 })));
    }

    #[test]
    fn optimizer_dispatch_rule() {
        assert_eq!(
            config(LossKind::CrossEntropy).optimizer_kind(),
            OptimizerKind::Adam
        );
        assert_eq!(
            config(LossKind::Triplet).optimizer_kind(),
            OptimizerKind::Adam
        );
        assert_eq!(
            config(LossKind::Arcface).optimizer_kind(),
            OptimizerKind::Adam
        );
        assert_eq!(
            config(LossKind::Contrastive).optimizer_kind(),
            OptimizerKind::Rmsprop
        );
        let mut cfg = config(LossKind::Contrastive);
        cfg.optimizer = Some(OptimizerKind::Sgd);
        assert_eq!(cfg.optimizer_kind(), OptimizerKind::Sgd);
    }

    #[test]
    fn zero_meta_iterations_emit_one_report() {
        let mut cfg = config(LossKind::CrossEntropy);
        cfg.meta_iterations = 0;
        cfg.epochs = 3;
        let pools = blob_pools(0.5, 20, 5, 1);
        let outcome = run_self_learning(&cfg, pools).unwrap();
        assert_eq!(outcome.reports.len(), 1);
        assert_eq!(outcome.reports[0].iteration, 0);
        assert_eq!(outcome.reports[0].selected_count, 0);
    }

    #[test]
    fn labeled_pool_grows_by_ceil_of_fraction() {
        let mut cfg = config(LossKind::CrossEntropy);
        cfg.meta_iterations = 3;
        cfg.epochs = 1;
        cfg.selection_fraction = 0.05;

        // 4 seed labels, exactly 100 unlabeled.
        let mut pools = blob_pools(0.5, 60, 2, 5);
        pools.unlabeled.truncate(100);
        let seed_count = pools.labeled.len();

        let outcome = run_self_learning(&cfg, pools).unwrap();
        let counts: Vec<usize> = outcome.reports.iter().map(|r| r.labeled_count).collect();
        // ceil(0.05*100)=5, ceil(0.05*95)=5, ceil(0.05*90)=5
        assert_eq!(
            counts,
            vec![seed_count, seed_count + 5, seed_count + 10, seed_count + 15]
        );
        let selected: Vec<usize> = outcome.reports.iter().map(|r| r.selected_count).collect();
        assert_eq!(selected, vec![0, 5, 5, 5]);
    }

    #[test]
    fn run_stops_early_when_unlabeled_exhausted() {
        let mut cfg = config(LossKind::CrossEntropy);
        cfg.meta_iterations = 10;
        cfg.epochs = 1;
        cfg.selection_fraction = 1.0;
        let mut pools = blob_pools(0.5, 30, 3, 8);
        pools.unlabeled.truncate(7);
        let outcome = run_self_learning(&cfg, pools).unwrap();
        // Iteration 1 promotes all 7; iteration 2 never starts.
        assert_eq!(outcome.reports.len(), 2);
        assert!(outcome.pools.unlabeled.is_empty());
    }

    #[test]
    fn seed_labels_survive_untouched() {
        let mut cfg = config(LossKind::Triplet);
        cfg.meta_iterations = 4;
        cfg.epochs = 2;
        let pools = blob_pools(0.6, 40, 3, 9);
        let seed_snapshot: Vec<(Vec<f64>, usize)> = pools
            .labeled
            .iter()
            .map(|e| (e.features.clone(), e.label))
            .collect();
        let outcome = run_self_learning(&cfg, pools).unwrap();
        let final_seeds: Vec<(Vec<f64>, usize)> = outcome
            .pools
            .labeled
            .iter()
            .filter(|e| e.origin == Origin::Seed)
            .map(|e| (e.features.clone(), e.label))
            .collect();
        assert_eq!(seed_snapshot, final_seeds);
    }

    #[test]
    fn pretrain_checkpoint_round_trips_and_transfers() {
        let mut cfg = config(LossKind::CrossEntropy);
        cfg.epochs = 5;
        let spec = DatasetSpec {
            kind: DatasetKind::GaussianBlobs,
            classes: 3,
            samples_per_class: 30,
            noise: 0.4,
            rotation_degrees: 0.0,
            seed: 4,
            images_path: None,
            labels_path: None,
        };
        let ds = generate(&spec).unwrap();
        let (model, ckpt) = pretrain_source(&ds, &cfg, "blobs-source").unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("src.ckpt");
        ckpt.save(&path).unwrap();
        let restored = Checkpoint::load(&path).unwrap();
        assert_eq!(restored, ckpt);

        // Body transfers; head is fresh.
        let tuned = fine_tune_from(&restored, &cfg.encoder, Some(4), 123).unwrap();
        for (name, param) in tuned.named_parameters() {
            if name.starts_with("layer") {
                assert_eq!(param.data(), restored.get(&name).unwrap().data());
            } else {
                let pre = model
                    .named_parameters()
                    .into_iter()
                    .find(|(n, _)| *n == name)
                    .map(|(_, a)| a.data().to_vec());
                assert_ne!(Some(param.data().to_vec()), pre);
            }
        }

        // Mismatched target spec is rejected.
        let mut other = cfg.encoder.clone();
        other.hidden = vec![8];
        assert!(matches!(
            fine_tune_from(&restored, &other, Some(4), 0),
            Err(Error::TransferIncompatible { .. })
        ));
    }

    // Mean silhouette over all points; independent of the embedding path.
    fn silhouette(embeddings: &DenseArray, labels: &[usize]) -> f64 {
        let n = labels.len();
        let dist = |i: usize, j: usize| {
            crate::tensor::euclidean(embeddings.row(i), embeddings.row(j))
        };
        let mut total = 0.0;
        for i in 0..n {
            let mut intra = Vec::new();
            let mut inter: std::collections::HashMap<usize, Vec<f64>> = Default::default();
            for j in 0..n {
                if i == j {
                    continue;
                }
                if labels[j] == labels[i] {
                    intra.push(dist(i, j));
                } else {
                    inter.entry(labels[j]).or_default().push(dist(i, j));
                }
            }
            let a = intra.iter().sum::<f64>() / intra.len() as f64;
            let b = inter
                .values()
                .map(|v| v.iter().sum::<f64>() / v.len() as f64)
                .fold(f64::INFINITY, f64::min);
            total += (b - a) / a.max(b);
        }
        total / n as f64
    }

    #[test]
    fn pretraining_separates_source_classes() {
        let mut cfg = config(LossKind::CrossEntropy);
        cfg.epochs = 30;
        let spec = DatasetSpec {
            kind: DatasetKind::GaussianBlobs,
            classes: 3,
            samples_per_class: 40,
            noise: 0.8,
            rotation_degrees: 0.0,
            seed: 14,
            images_path: None,
            labels_path: None,
        };
        let ds = generate(&spec).unwrap();
        let features = DenseArray::from_rows(&ds.features).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let random_model = build_random_model(&cfg, ds.classes, &mut rng);
        let random_sep = silhouette(&random_model.encoder.embed(&features).unwrap(), &ds.labels);

        let (trained, _) = pretrain_source(&ds, &cfg, "src").unwrap();
        let trained_sep = silhouette(&trained.encoder.embed(&features).unwrap(), &ds.labels);
        assert!(
            trained_sep > random_sep,
            "silhouette before {random_sep}, after {trained_sep}"
        );
    }

    #[test]
    fn full_run_is_bit_deterministic() {
        let mut cfg = config(LossKind::Triplet);
        cfg.meta_iterations = 3;
        cfg.epochs = 3;
        let run = || {
            let pools = blob_pools(0.5, 30, 3, 21);
            run_self_learning(&cfg, pools).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.reports, b.reports);
        for ((_, pa), (_, pb)) in a
            .model
            .named_parameters()
            .iter()
            .zip(b.model.named_parameters().iter())
        {
            assert_eq!(pa.data(), pb.data());
        }
    }

    #[test]
    fn rejects_feature_dim_mismatch() {
        let cfg = config(LossKind::CrossEntropy);
        let pools = DataPools {
            labeled: vec![LabeledExample {
                features: vec![0.0, 1.0, 2.0],
                label: 0,
                origin: Origin::Seed,
            }],
            unlabeled: vec![UnlabeledExample {
                features: vec![0.0, 1.0, 2.0],
                audit_label: None,
            }],
            test: vec![],
            classes: 2,
        };
        assert!(matches!(
            run_self_learning(&cfg, pools),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
