//! Joint two-branch identity training with a single shared classifier.
//!
//! Both modality losses are the same averaged cross-entropy ([`id_loss`])
//! evaluated against one [`JointClassifier`] matrix; the classifier update
//! is the λ-weighted mean `(λ1·g_img + λ2·g_txt) / 2` of its two per-loss
//! gradients, while every other parameter receives its plain λ-weighted
//! gradient. Initialization/freezing follows the five [`StrategyPlan`]
//! rows; [`run_stage`] drives one stage of the two-stage schedule with
//! SGD momentum and step decay.
//!
//! Every random draw comes from a substream named after its purpose and
//! epoch (`shuffle-s1e0`, `textpick-s1e0`, `textaug-s1e0`,
//! `vision-dropout-s1e0`, `lang-dropout-s1e0`), so the language-side
//! streams are identical whether or not the vision branch participates.

use std::io::Write;

use ndarray::{s, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetIndex, Modality, Payload, Split};
use crate::error::{Error, Result};
use crate::nn::{Batch, Encoder, EncoderGrads, Mode};
use crate::rng::substream;
use crate::scalar::{cast, to_f64, Scalar};
use crate::text::{augment_word_drop, augment_zero_shift, encode_sentence, Dictionary, EmbeddingTable, TokenSequence};

/// The shared identity classifier: one `I × d` matrix, no bias, read by
/// both modality losses. Single storage is what couples the branches.
#[derive(Debug, Clone, PartialEq)]
pub struct JointClassifier<F> {
    w: Array2<F>,
}

impl<F: Scalar> JointClassifier<F> {
    /// Seeded Gaussian init with σ = 1/√d.
    pub fn new_seeded(classes: usize, dim: usize, seed: u64) -> Self {
        let mut rng = substream(seed, "init-classifier");
        let sigma = 1.0 / (dim as f64).sqrt();
        let w = Array2::from_shape_fn((classes, dim), |_| {
            cast::<F>(rng.sample::<f64, _>(StandardNormal) * sigma)
        });
        JointClassifier { w }
    }

    pub fn from_weights(w: Array2<F>) -> Result<Self> {
        if w.nrows() == 0 || w.ncols() == 0 {
            return Err(Error::ShapeMismatch {
                context: "classifier weights".into(),
                expected: "non-empty matrix".into(),
                actual: format!("{}x{}", w.nrows(), w.ncols()),
            });
        }
        Ok(JointClassifier { w })
    }

    pub fn classes(&self) -> usize {
        self.w.nrows()
    }

    pub fn dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn weights(&self) -> &Array2<F> {
        &self.w
    }

    /// `N × I` identity logits, `z = f · Wᵀ`.
    pub fn logits(&self, features: &Array2<F>) -> Array2<F> {
        features.dot(&self.w.t())
    }

    pub fn sgd_step(&mut self, grad: &Array2<F>, velocity: &mut Array2<F>, lr: F, momentum: F) {
        ndarray::Zip::from(&mut self.w).and(grad).and(velocity).for_each(|p, &g, v| {
            *v = momentum * *v + g;
            *p = *p - lr * *v;
        });
    }

    pub fn params_digest(&self) -> String {
        digest_matrix(&self.w)
    }
}

/// Bitwise digest of a matrix's f64 image (frozen-group verification).
pub fn digest_matrix<F: Scalar>(m: &Array2<F>) -> String {
    let mut bytes = Vec::with_capacity(m.len() * 8);
    for &v in m.iter() {
        bytes.extend_from_slice(&to_f64(v).to_bits().to_le_bytes());
    }
    crate::util::sha256_hex(&bytes)
}

/// Averaged identity cross-entropy over a feature batch, with gradients
/// for the classifier and the features.
#[derive(Debug, Clone)]
pub struct LossGrads<F> {
    pub loss: F,
    /// `I × d`, same layout as the classifier matrix.
    pub grad_w: Array2<F>,
    /// `N × d`.
    pub grad_features: Array2<F>,
    /// Batch items whose arg-max logit hits the target label.
    pub correct: usize,
}

/// `L = −(1/N) Σ log softmax(W·f)[label]`, stabilized by a log-sum-exp
/// shift. Used verbatim by both branches; the shared matrix is the point.
pub fn id_loss<F: Scalar>(
    features: &Array2<F>,
    labels: &[u32],
    classifier: &JointClassifier<F>,
) -> Result<LossGrads<F>> {
    let (n, d) = features.dim();
    if n == 0 {
        return Err(Error::ShapeMismatch {
            context: "identity loss".into(),
            expected: "non-empty batch".into(),
            actual: "0 samples".into(),
        });
    }
    if labels.len() != n || d != classifier.dim() {
        return Err(Error::ShapeMismatch {
            context: "identity loss".into(),
            expected: format!("{n} labels over {}-dim features", classifier.dim()),
            actual: format!("{} labels, {d}-dim features", labels.len()),
        });
    }
    let classes = classifier.classes();
    for &label in labels {
        if label as usize >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
    }

    let logits = classifier.logits(features);
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            context: "identity logits".into(),
        });
    }

    let inv_n = cast::<F>(1.0 / n as f64);
    let mut loss = F::zero();
    let mut correct = 0usize;
    // dZ = (softmax − one-hot) / N, accumulated row by row.
    let mut dz = Array2::zeros((n, classes));
    for (i, (row, &label)) in logits.rows().into_iter().zip(labels).enumerate() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let sum_exp: F = row.iter().map(|&z| (z - max).exp()).sum();
        let lse = max + sum_exp.ln();
        loss += lse - row[label as usize];
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
            .map(|(j, _)| j)
            .expect("non-empty row");
        if argmax == label as usize {
            correct += 1;
        }
        for (j, &z) in row.iter().enumerate() {
            let p = (z - max).exp() / sum_exp;
            let target = if j == label as usize { F::one() } else { F::zero() };
            dz[[i, j]] = (p - target) * inv_n;
        }
    }
    loss *= inv_n;

    let grad_w = dz.t().dot(features);
    let grad_features = dz.dot(classifier.weights());
    Ok(LossGrads {
        loss,
        grad_w,
        grad_features,
        correct,
    })
}

/// Where a parameter group's initial values come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitSource {
    /// Checkpoint from an unrelated auxiliary classification task.
    AuxiliaryPretrained,
    /// Checkpoint from single-modality training on the task data.
    TaskPretrained,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupPlan {
    pub init: InitSource,
    pub stage1_learnable: bool,
}

/// Init source and stage-1 learnability per parameter group. The vision
/// group is the encoder body below the two-dense head; the language group
/// is the whole conv branch plus the embedding table; the FC group (both
/// head dense blocks and the shared classifier) is always random-initialized
/// and learnable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyPlan {
    pub vision: GroupPlan,
    pub language: GroupPlan,
    pub fc: GroupPlan,
}

impl StrategyPlan {
    pub fn custom(vision: GroupPlan, language: GroupPlan) -> Self {
        StrategyPlan {
            vision,
            language,
            fc: GroupPlan {
                init: InitSource::Random,
                stage1_learnable: true,
            },
        }
    }

    /// Every group random-initialized and learnable (no pretrained inputs).
    pub fn random_baseline() -> Self {
        let open = GroupPlan {
            init: InitSource::Random,
            stage1_learnable: true,
        };
        StrategyPlan::custom(open, open)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fc.init != InitSource::Random || !self.fc.stage1_learnable {
            return Err(Error::Config {
                reason: "the FC group is always random-initialized and learnable".into(),
            });
        }
        Ok(())
    }

    /// Freeze boundaries for one stage: stage 1 honors the plan, stage 2
    /// tunes everything.
    pub fn freeze_for_stage(&self, stage: u8, vision_head_start: usize) -> FreezePlan {
        if stage >= 2 {
            return FreezePlan {
                vision_from_layer: 0,
                language_frozen: false,
            };
        }
        FreezePlan {
            vision_from_layer: if self.vision.stage1_learnable { 0 } else { vision_head_start },
            language_frozen: !self.language.stage1_learnable,
        }
    }
}

/// The five initialization/learning strategies.
pub fn apply_strategy(strategy_id: u8) -> Result<StrategyPlan> {
    let (vision, language) = match strategy_id {
        1 => (
            GroupPlan { init: InitSource::TaskPretrained, stage1_learnable: false },
            GroupPlan { init: InitSource::TaskPretrained, stage1_learnable: false },
        ),
        2 => (
            GroupPlan { init: InitSource::TaskPretrained, stage1_learnable: true },
            GroupPlan { init: InitSource::TaskPretrained, stage1_learnable: true },
        ),
        3 => (
            GroupPlan { init: InitSource::TaskPretrained, stage1_learnable: false },
            GroupPlan { init: InitSource::TaskPretrained, stage1_learnable: true },
        ),
        4 => (
            GroupPlan { init: InitSource::AuxiliaryPretrained, stage1_learnable: false },
            GroupPlan { init: InitSource::Random, stage1_learnable: true },
        ),
        5 => (
            GroupPlan { init: InitSource::Random, stage1_learnable: true },
            GroupPlan { init: InitSource::TaskPretrained, stage1_learnable: false },
        ),
        id => return Err(Error::UnknownStrategy { id: id as u32 }),
    };
    Ok(StrategyPlan::custom(vision, language))
}

/// Update boundaries for one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FreezePlan {
    /// Vision layers below this index receive no updates.
    pub vision_from_layer: usize,
    /// Frozen language branch: conv stack and embedding both untouched.
    pub language_frozen: bool,
}

impl FreezePlan {
    pub fn all_learnable() -> Self {
        FreezePlan {
            vision_from_layer: 0,
            language_frozen: false,
        }
    }
}

/// Architecture of both branches (persisted alongside checkpoints).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArch {
    pub vision_input: usize,
    pub vision: Vec<crate::nn::LayerSpec>,
    pub language: Vec<crate::nn::LayerSpec>,
    pub l_max: usize,
    pub e_dim: usize,
}

/// Both encoders, the embedding table, and the one shared classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct JointModel<F> {
    pub vision: Encoder<F>,
    pub language: Encoder<F>,
    pub embedding: EmbeddingTable<F>,
    pub classifier: JointClassifier<F>,
}

impl<F: Scalar> JointModel<F> {
    pub fn new(
        vision: Encoder<F>,
        language: Encoder<F>,
        embedding: EmbeddingTable<F>,
        classifier: JointClassifier<F>,
    ) -> Result<Self> {
        if vision.feature_dim() != language.feature_dim() {
            return Err(Error::ShapeMismatch {
                context: "joint model feature dimension".into(),
                expected: vision.feature_dim().to_string(),
                actual: language.feature_dim().to_string(),
            });
        }
        if classifier.dim() != vision.feature_dim() {
            return Err(Error::ShapeMismatch {
                context: "classifier feature dimension".into(),
                expected: vision.feature_dim().to_string(),
                actual: classifier.dim().to_string(),
            });
        }
        if embedding.e_dim() != language.input_shape().1 {
            return Err(Error::ShapeMismatch {
                context: "embedding width vs language input".into(),
                expected: language.input_shape().1.to_string(),
                actual: embedding.e_dim().to_string(),
            });
        }
        Ok(JointModel {
            vision,
            language,
            embedding,
            classifier,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.vision.feature_dim()
    }

    pub fn classes(&self) -> usize {
        self.classifier.classes()
    }

    /// Embeds a token batch into the language branch's input layout.
    pub fn embed_tokens(&self, tokens: &[TokenSequence]) -> Result<Batch<F>> {
        let mats: Vec<Array2<F>> = tokens
            .iter()
            .map(|t| self.embedding.embed(t))
            .collect::<Result<_>>()?;
        let lengths = tokens.iter().map(|t| t.true_length).collect();
        Batch::from_matrices(&mats, Some(lengths))
    }
}

/// Pretrained checkpoints a strategy may pull inits from.
#[derive(Debug, Clone, Default)]
pub struct PretrainedStore<F> {
    pub vision_task: Option<Encoder<F>>,
    pub vision_auxiliary: Option<Encoder<F>>,
    pub language_task: Option<(Encoder<F>, EmbeddingTable<F>)>,
}

/// Builds a joint model per the strategy plan: seeded random everywhere,
/// then pretrained groups copied in (vision body only — its head belongs
/// to the always-random FC group; language branch plus embedding whole).
pub fn init_joint_model<F: Scalar>(
    arch: &ModelArch,
    vocab_size: usize,
    classes: usize,
    plan: &StrategyPlan,
    store: &PretrainedStore<F>,
    seed: u64,
) -> Result<JointModel<F>> {
    plan.validate()?;
    let mut vision = Encoder::vision(arch.vision_input, &arch.vision, seed)?;
    let mut language = Encoder::language(arch.l_max, arch.e_dim, &arch.language, seed)?;
    let mut embedding = EmbeddingTable::new_seeded(vocab_size, arch.e_dim, seed);
    let classifier = JointClassifier::new_seeded(classes, vision.feature_dim(), seed);

    match plan.vision.init {
        InitSource::Random => {}
        InitSource::TaskPretrained => {
            let src = store.vision_task.as_ref().ok_or(Error::MissingInitCheckpoint {
                group: "vision task-pretrained".into(),
            })?;
            vision.copy_body_from(src)?;
        }
        InitSource::AuxiliaryPretrained => {
            let src = store.vision_auxiliary.as_ref().ok_or(Error::MissingInitCheckpoint {
                group: "vision auxiliary-pretrained".into(),
            })?;
            vision.copy_body_from(src)?;
        }
    }
    match plan.language.init {
        InitSource::Random => {}
        InitSource::TaskPretrained => {
            let (enc, emb) = store.language_task.as_ref().ok_or(Error::MissingInitCheckpoint {
                group: "language task-pretrained".into(),
            })?;
            language.copy_params_from(enc)?;
            if emb.rows() != embedding.rows() || emb.e_dim() != embedding.e_dim() {
                return Err(Error::ShapeMismatch {
                    context: "pretrained embedding table".into(),
                    expected: format!("{}x{}", embedding.rows(), embedding.e_dim()),
                    actual: format!("{}x{}", emb.rows(), emb.e_dim()),
                });
            }
            embedding = emb.clone();
        }
        InitSource::AuxiliaryPretrained => {
            return Err(Error::MissingInitCheckpoint {
                group: "language auxiliary-pretrained".into(),
            });
        }
    }

    JointModel::new(vision, language, embedding, classifier)
}

/// Hyperparameters for one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub decay_factor: f64,
    pub decay_period: usize,
    pub strategy: u8,
    pub stage: u8,
    pub word_drop_prob: f64,
    pub zero_shift: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda1: 1.0,
            lambda2: 1.0,
            batch_size: 16,
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 60,
            decay_factor: 0.1,
            decay_period: 20,
            strategy: 4,
            stage: 1,
            word_drop_prob: 0.1,
            zero_shift: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |name: &str, reason: &str| Error::InvalidHyperparameter {
            name: name.into(),
            reason: reason.into(),
        };
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(bad("lambda", "loss weights must be non-negative"));
        }
        if self.lambda1 + self.lambda2 <= 0.0 {
            return Err(bad("lambda", "at least one loss weight must be positive"));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(bad("learning_rate", "must be a positive finite number"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(bad("momentum", "must lie in [0, 1)"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(bad("decay_factor", "must lie in (0, 1]"));
        }
        if self.decay_period == 0 {
            return Err(bad("decay_period", "must be at least 1"));
        }
        if !(1..=5).contains(&self.strategy) {
            return Err(Error::UnknownStrategy { id: self.strategy as u32 });
        }
        if !(1..=2).contains(&self.stage) {
            return Err(bad("stage", "must be 1 or 2"));
        }
        if !(0.0..1.0).contains(&self.word_drop_prob) {
            return Err(bad("word_drop_prob", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Step-decayed learning rate for a 0-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay_factor.powi((epoch / self.decay_period) as i32)
    }
}

/// Training tensors derived from a train split: one row per image, all
/// encoded descriptions, and each image's candidate description indices.
#[derive(Debug, Clone)]
pub struct TrainingSet<F> {
    /// `n_images × vision_dim`, ordered by (identity, view, sample_id).
    pub vision: Array2<F>,
    /// Label per image row.
    pub labels: Vec<u32>,
    /// All encoded descriptions, ordered by (identity, view, sample_id).
    pub tokens: Vec<TokenSequence>,
    /// Label per description.
    pub token_labels: Vec<u32>,
    /// Per image row: indices into `tokens` this image may pair with
    /// (its associated descriptions, falling back to all of the
    /// identity's descriptions).
    pub text_choices: Vec<Vec<usize>>,
    pub classes: usize,
}

impl<F> TrainingSet<F> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub fn build_training_set<F: Scalar>(
    ds: &Dataset,
    dict: &Dictionary,
    l_max: usize,
) -> Result<TrainingSet<F>> {
    if ds.split() != Split::Train {
        return Err(Error::Config {
            reason: "training sets are built from the train split".into(),
        });
    }
    let vision_dim = ds.vision_dim().ok_or(Error::Config {
        reason: "train split has no vision samples".into(),
    })?;
    let index = DatasetIndex::build(ds);

    let mut image_rows: Vec<usize> = Vec::new();
    let mut text_rows: Vec<usize> = Vec::new();
    for identity in index.identities() {
        for view in index.views(identity).expect("identity just listed").values() {
            image_rows.extend(&view.vision);
            text_rows.extend(&view.text);
        }
    }

    let mut vision = Array2::zeros((image_rows.len(), vision_dim));
    let mut labels = Vec::with_capacity(image_rows.len());
    for (row, &idx) in image_rows.iter().enumerate() {
        let sample = &ds.samples()[idx];
        let Payload::Vision(v) = &sample.payload else {
            unreachable!("index separates modalities");
        };
        for (slot, &x) in vision.row_mut(row).iter_mut().zip(v) {
            *slot = cast::<F>(x);
        }
        labels.push(sample.identity);
    }

    let mut tokens = Vec::with_capacity(text_rows.len());
    let mut token_labels = Vec::with_capacity(text_rows.len());
    let mut token_pos = std::collections::BTreeMap::new();
    for &idx in &text_rows {
        let sample = &ds.samples()[idx];
        let Payload::Text(sentence) = &sample.payload else {
            unreachable!("index separates modalities");
        };
        token_pos.insert(idx, tokens.len());
        tokens.push(encode_sentence(sentence, dict, l_max)?);
        token_labels.push(sample.identity);
    }

    let mut text_choices = Vec::with_capacity(image_rows.len());
    for &idx in &image_rows {
        let sample = &ds.samples()[idx];
        let mut choices: Vec<usize> = index
            .associated_texts(ds, idx)
            .into_iter()
            .map(|t| token_pos[&t])
            .collect();
        if choices.is_empty() {
            choices = index
                .identity_texts(sample.identity)
                .into_iter()
                .map(|t| token_pos[&t])
                .collect();
        }
        if choices.is_empty() {
            return Err(Error::MissingModality {
                identity: ds.identity_name(sample.identity).to_string(),
                modality: Modality::Text,
            });
        }
        text_choices.push(choices);
    }

    Ok(TrainingSet {
        vision,
        labels,
        tokens,
        token_labels,
        text_choices,
        classes: ds.identity_count(),
    })
}

/// Momentum buffers for every parameter group.
#[derive(Debug, Clone)]
pub struct Velocities<F> {
    pub vision: EncoderGrads<F>,
    pub language: EncoderGrads<F>,
    pub embedding: Array2<F>,
    pub classifier: Array2<F>,
}

impl<F: Scalar> Velocities<F> {
    pub fn zero(model: &JointModel<F>) -> Self {
        Velocities {
            vision: model.vision.zero_grads(),
            language: model.language.zero_grads(),
            embedding: Array2::zeros(model.embedding.table().dim()),
            classifier: Array2::zeros(model.classifier.weights().dim()),
        }
    }
}

/// Per-step λ/optimizer knobs, pre-cast to the model scalar.
#[derive(Debug, Clone, Copy)]
pub struct StepConfig<F> {
    pub lambda1: F,
    pub lambda2: F,
    pub lr: F,
    pub momentum: F,
}

/// Per-step metrics.
#[derive(Debug, Clone, Copy)]
pub struct StepOutcome<F> {
    pub l_img: F,
    pub l_txt: F,
    pub total: F,
    pub correct_img: usize,
    pub correct_txt: usize,
    pub n: usize,
}

/// One optimization step on a paired batch. The classifier receives the
/// halved λ-weighted gradient sum; encoders receive plain λ-weighted
/// gradients; frozen groups receive nothing (weights, momentum, and
/// batch-norm running statistics all untouched).
#[allow(clippy::too_many_arguments)]
pub fn joint_step<F: Scalar>(
    model: &mut JointModel<F>,
    velocity: &mut Velocities<F>,
    images: &Batch<F>,
    tokens: &[TokenSequence],
    labels: &[u32],
    step: &StepConfig<F>,
    freeze: &FreezePlan,
    rng_vision: &mut ChaCha8Rng,
    rng_language: &mut ChaCha8Rng,
) -> Result<StepOutcome<F>> {
    let n = labels.len();
    if images.len() != n || tokens.len() != n || n == 0 {
        return Err(Error::ShapeMismatch {
            context: "joint step batch".into(),
            expected: "equal non-zero image/token/label counts".into(),
            actual: format!("{} images, {} tokens, {} labels", images.len(), tokens.len(), n),
        });
    }

    let (f_img, trace_v) = model.vision.forward(images, Mode::Train, Some(rng_vision))?;
    let lang_batch = model.embed_tokens(tokens)?;
    let (f_txt, trace_l) = model.language.forward(&lang_batch, Mode::Train, Some(rng_language))?;

    let img = id_loss(&f_img, labels, &model.classifier)?;
    let txt = id_loss(&f_txt, labels, &model.classifier)?;
    let total = step.lambda1 * img.loss + step.lambda2 * txt.loss;
    if !total.is_finite() {
        return Err(Error::NonFinite {
            context: format!(
                "joint loss (L_img={:?}, L_txt={:?}); step aborted before any update",
                img.loss, txt.loss
            ),
        });
    }

    // Shared classifier: mean of the two per-loss gradients, λ-weighted.
    let half = cast::<F>(0.5);
    let grad_w = (&img.grad_w * step.lambda1 + &txt.grad_w * step.lambda2) * half;
    model
        .classifier
        .sgd_step(&grad_w, &mut velocity.classifier, step.lr, step.momentum);

    // Vision branch: λ1-weighted gradient; body possibly frozen.
    let vision_out_grad = &img.grad_features * step.lambda1;
    let (grads_v, _) = model.vision.backward(&trace_v, &vision_out_grad)?;
    model.vision.sgd_step(
        &grads_v,
        &mut velocity.vision,
        step.lr,
        step.momentum,
        freeze.vision_from_layer,
    );
    model.vision.update_running_stats(&trace_v, freeze.vision_from_layer);

    // Language branch plus embedding: λ2-weighted, frozen as a whole.
    if !freeze.language_frozen {
        let lang_out_grad = &txt.grad_features * step.lambda2;
        let (grads_l, input_grad) = model.language.backward(&trace_l, &lang_out_grad)?;
        model
            .language
            .sgd_step(&grads_l, &mut velocity.language, step.lr, step.momentum, 0);
        model.language.update_running_stats(&trace_l, 0);

        let mut grad_emb = Array2::zeros(model.embedding.table().dim());
        for (i, seq) in tokens.iter().enumerate() {
            model
                .embedding
                .accumulate_grad(seq, &input_grad.slice(s![i, .., ..]), &mut grad_emb);
        }
        model
            .embedding
            .sgd_step(&grad_emb, &mut velocity.embedding, step.lr, step.momentum);
    }

    Ok(StepOutcome {
        l_img: img.loss,
        l_txt: txt.loss,
        total,
        correct_img: img.correct,
        correct_txt: txt.correct,
        n,
    })
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(rename = "L_img")]
    pub l_img: f64,
    #[serde(rename = "L_txt")]
    pub l_txt: f64,
    pub total: f64,
    pub lr: f64,
    pub acc_img: f64,
    pub acc_txt: f64,
}

fn stage_stream(seed: u64, name: &str, stage: u8, epoch: usize) -> ChaCha8Rng {
    substream(seed, &format!("{name}-s{stage}e{epoch}"))
}

/// Fisher–Yates shuffle of item indices, chunked into batches; a trailing
/// partial batch is kept.
fn plan_epoch(items: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..items).collect();
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Gathers the vision rows of one batch.
fn assemble_vision_batch<F: Scalar>(set: &TrainingSet<F>, batch: &[usize]) -> Batch<F> {
    let dim = set.vision.ncols();
    let mut rows = Array2::zeros((batch.len(), dim));
    for (r, &item) in batch.iter().enumerate() {
        rows.row_mut(r).assign(&set.vision.row(item));
    }
    Batch::from_vectors(rows)
}

/// Picks and augments one description per batch item: a uniform draw from
/// the item's candidates, then word-drop and optional zero-shift.
fn assemble_text_batch<F: Scalar>(
    set: &TrainingSet<F>,
    batch: &[usize],
    pick_rng: &mut ChaCha8Rng,
    aug_rng: &mut ChaCha8Rng,
    word_drop_prob: f64,
    zero_shift: bool,
) -> Result<Vec<TokenSequence>> {
    let mut out = Vec::with_capacity(batch.len());
    for &item in batch {
        let choices = &set.text_choices[item];
        let chosen = choices[pick_rng.random_range(0..choices.len())];
        let mut seq = augment_word_drop(&set.tokens[chosen], word_drop_prob, aug_rng)?;
        if zero_shift {
            seq = augment_zero_shift(&seq, aug_rng);
        }
        out.push(seq);
    }
    Ok(out)
}

fn embedding_digest<F: Scalar>(emb: &EmbeddingTable<F>) -> String {
    digest_matrix(emb.table())
}

/// Runs one stage of joint training: shuffled batches, λ-weighted losses,
/// the shared-classifier update rule, step-decayed SGD momentum. Momentum
/// buffers start at zero (so stage 2 begins with reset velocity), and
/// frozen groups are digest-checked for bitwise stability every epoch.
pub fn run_stage<F: Scalar, W: Write>(
    model: &mut JointModel<F>,
    set: &TrainingSet<F>,
    cfg: &TrainConfig,
    plan: &StrategyPlan,
    mut log: Option<&mut W>,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    plan.validate()?;
    if set.is_empty() {
        return Err(Error::Config {
            reason: "training set is empty".into(),
        });
    }
    if set.classes != model.classes() {
        return Err(Error::ShapeMismatch {
            context: "training set classes".into(),
            expected: model.classes().to_string(),
            actual: set.classes.to_string(),
        });
    }
    let freeze = plan.freeze_for_stage(cfg.stage, model.vision.head_start());
    let frozen_vision = (freeze.vision_from_layer > 0)
        .then(|| model.vision.params_digest(0, freeze.vision_from_layer));
    let frozen_language = freeze.language_frozen.then(|| {
        (
            model.language.params_digest(0, model.language.layer_count()),
            embedding_digest(&model.embedding),
        )
    });

    let mut velocity = Velocities::zero(model);
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let step = StepConfig {
            lambda1: cast::<F>(cfg.lambda1),
            lambda2: cast::<F>(cfg.lambda2),
            lr: cast::<F>(lr),
            momentum: cast::<F>(cfg.momentum),
        };
        let mut shuffle = stage_stream(cfg.seed, "shuffle", cfg.stage, epoch);
        let mut pick = stage_stream(cfg.seed, "textpick", cfg.stage, epoch);
        let mut aug = stage_stream(cfg.seed, "textaug", cfg.stage, epoch);
        let mut rng_v = stage_stream(cfg.seed, "vision-dropout", cfg.stage, epoch);
        let mut rng_l = stage_stream(cfg.seed, "lang-dropout", cfg.stage, epoch);

        let mut sums = (0.0f64, 0.0f64, 0.0f64);
        let mut correct = (0usize, 0usize);
        let mut seen = 0usize;
        for batch in plan_epoch(set.len(), cfg.batch_size, &mut shuffle) {
            let images = assemble_vision_batch(set, &batch);
            let texts = assemble_text_batch(set, &batch, &mut pick, &mut aug, cfg.word_drop_prob, cfg.zero_shift)?;
            let labels: Vec<u32> = batch.iter().map(|&i| set.labels[i]).collect();
            let out = joint_step(
                model,
                &mut velocity,
                &images,
                &texts,
                &labels,
                &step,
                &freeze,
                &mut rng_v,
                &mut rng_l,
            )?;
            sums.0 += to_f64(out.l_img) * out.n as f64;
            sums.1 += to_f64(out.l_txt) * out.n as f64;
            sums.2 += to_f64(out.total) * out.n as f64;
            correct.0 += out.correct_img;
            correct.1 += out.correct_txt;
            seen += out.n;
        }

        let record = EpochRecord {
            epoch,
            l_img: sums.0 / seen as f64,
            l_txt: sums.1 / seen as f64,
            total: sums.2 / seen as f64,
            lr,
            acc_img: correct.0 as f64 / seen as f64,
            acc_txt: correct.1 as f64 / seen as f64,
        };
        if let Some(w) = log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
        }
        records.push(record);

        if let Some(expected) = &frozen_vision {
            let now = model.vision.params_digest(0, freeze.vision_from_layer);
            if &now != expected {
                return Err(Error::FrozenGroupViolation {
                    group: "vision".into(),
                });
            }
        }
        if let Some((enc_digest, emb_digest)) = &frozen_language {
            let enc_now = model.language.params_digest(0, model.language.layer_count());
            let emb_now = embedding_digest(&model.embedding);
            if &enc_now != enc_digest || &emb_now != emb_digest {
                return Err(Error::FrozenGroupViolation {
                    group: "language".into(),
                });
            }
        }
    }
    Ok(records)
}

/// Single-modality vision training (its own classifier, plain gradients).
/// Produces the task-pretrained and auxiliary-pretrained vision inits.
pub fn train_vision_only<F: Scalar>(
    encoder: &mut Encoder<F>,
    classifier: &mut JointClassifier<F>,
    set: &TrainingSet<F>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    let mut vel_enc = encoder.zero_grads();
    let mut vel_cls = Array2::zeros(classifier.weights().dim());
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cast::<F>(cfg.lr_at(epoch));
        let momentum = cast::<F>(cfg.momentum);
        let mut shuffle = stage_stream(cfg.seed, "shuffle", cfg.stage, epoch);
        let mut rng_v = stage_stream(cfg.seed, "vision-dropout", cfg.stage, epoch);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for batch in plan_epoch(set.len(), cfg.batch_size, &mut shuffle) {
            let images = assemble_vision_batch(set, &batch);
            let labels: Vec<u32> = batch.iter().map(|&i| set.labels[i]).collect();
            let (f, trace) = encoder.forward(&images, Mode::Train, Some(&mut rng_v))?;
            let out = id_loss(&f, &labels, classifier)?;
            classifier.sgd_step(&out.grad_w, &mut vel_cls, lr, momentum);
            let (grads, _) = encoder.backward(&trace, &out.grad_features)?;
            encoder.sgd_step(&grads, &mut vel_enc, lr, momentum, 0);
            encoder.update_running_stats(&trace, 0);
            loss_sum += to_f64(out.loss) * labels.len() as f64;
            correct += out.correct;
            seen += labels.len();
        }
        records.push(EpochRecord {
            epoch,
            l_img: loss_sum / seen as f64,
            l_txt: 0.0,
            total: loss_sum / seen as f64,
            lr: to_f64(lr),
            acc_img: correct as f64 / seen as f64,
            acc_txt: 0.0,
        });
    }
    Ok(records)
}

/// Single-modality language training over every description (its own
/// classifier, plain gradients). Produces the task-pretrained language init.
pub fn train_language_only<F: Scalar>(
    encoder: &mut Encoder<F>,
    embedding: &mut EmbeddingTable<F>,
    classifier: &mut JointClassifier<F>,
    set: &TrainingSet<F>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    let mut vel_enc = encoder.zero_grads();
    let mut vel_emb = Array2::zeros(embedding.table().dim());
    let mut vel_cls = Array2::zeros(classifier.weights().dim());
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cast::<F>(cfg.lr_at(epoch));
        let momentum = cast::<F>(cfg.momentum);
        let mut shuffle = stage_stream(cfg.seed, "shuffle", cfg.stage, epoch);
        let mut aug = stage_stream(cfg.seed, "textaug", cfg.stage, epoch);
        let mut rng_l = stage_stream(cfg.seed, "lang-dropout", cfg.stage, epoch);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for batch in plan_epoch(set.tokens.len(), cfg.batch_size, &mut shuffle) {
            let mut texts = Vec::with_capacity(batch.len());
            for &item in &batch {
                let mut seq = augment_word_drop(&set.tokens[item], cfg.word_drop_prob, &mut aug)?;
                if cfg.zero_shift {
                    seq = augment_zero_shift(&seq, &mut aug);
                }
                texts.push(seq);
            }
            let labels: Vec<u32> = batch.iter().map(|&i| set.token_labels[i]).collect();
            let mats: Vec<Array2<F>> = texts.iter().map(|t| embedding.embed(t)).collect::<Result<_>>()?;
            let lengths = texts.iter().map(|t| t.true_length).collect();
            let lang_batch = Batch::from_matrices(&mats, Some(lengths))?;
            let (f, trace) = encoder.forward(&lang_batch, Mode::Train, Some(&mut rng_l))?;
            let out = id_loss(&f, &labels, classifier)?;
            classifier.sgd_step(&out.grad_w, &mut vel_cls, lr, momentum);
            let (grads, input_grad) = encoder.backward(&trace, &out.grad_features)?;
            encoder.sgd_step(&grads, &mut vel_enc, lr, momentum, 0);
            encoder.update_running_stats(&trace, 0);
            let mut grad_emb = Array2::zeros(embedding.table().dim());
            for (i, seq) in texts.iter().enumerate() {
                embedding.accumulate_grad(seq, &input_grad.slice(s![i, .., ..]), &mut grad_emb);
            }
            embedding.sgd_step(&grad_emb, &mut vel_emb, lr, momentum);
            loss_sum += to_f64(out.loss) * labels.len() as f64;
            correct += out.correct;
            seen += labels.len();
        }
        records.push(EpochRecord {
            epoch,
            l_img: 0.0,
            l_txt: loss_sum / seen as f64,
            total: loss_sum / seen as f64,
            lr: to_f64(lr),
            acc_img: 0.0,
            acc_txt: correct as f64 / seen as f64,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticSpec};
    use crate::nn::LayerSpec;
    use crate::text::build_dictionary;

    const LN_10: f64 = 2.302585092994046;
    const LN_1P_EXP_NEG2: f64 = 0.126_928_011_042_972_63;

    fn tiny_arch(vision_input: usize, l_max: usize, e_dim: usize, d: usize) -> ModelArch {
        ModelArch {
            vision_input,
            vision: vec![
                LayerSpec::Dense { units: 12 },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::Dense { units: 12 },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::Dropout { keep_prob: 1.0 },
                LayerSpec::Dense { units: d },
                LayerSpec::BatchNorm,
            ],
            language: vec![
                LayerSpec::Conv1dK3 { channels: 16 },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::Conv1dK3 { channels: d },
                LayerSpec::GlobalAvgPool { masked: true },
            ],
            l_max,
            e_dim,
        }
    }

    fn random_plan() -> StrategyPlan {
        StrategyPlan::custom(
            GroupPlan { init: InitSource::Random, stage1_learnable: true },
            GroupPlan { init: InitSource::Random, stage1_learnable: true },
        )
    }

    /// Train split of a small noise-free synthetic task plus its dictionary
    /// and training set.
    fn tiny_training_set(
        ids: usize,
        per: usize,
        l_max: usize,
    ) -> (TrainingSet<f64>, Dictionary, usize) {
        let spec = SyntheticSpec {
            identity_count: ids,
            samples_per_identity_per_modality: per,
            latent_dim: 3,
            vision_dim: 8,
            text_vocab: 3 * 16 + 1,
            noise_sigma: 0.0,
            seed: 11,
            quantization_levels: 16,
            distractors_per_sentence: 1,
        };
        let ds = generate_synthetic(&spec, Split::Train).unwrap();
        let sentences: Vec<String> = ds
            .samples()
            .iter()
            .filter_map(|s| match &s.payload {
                Payload::Text(t) => Some(t.clone()),
                _ => None,
            })
            .collect();
        let dict = build_dictionary(&sentences, 1).unwrap();
        let set = build_training_set::<f64>(&ds, &dict, l_max).unwrap();
        (set, dict, 8)
    }

    #[test]
    fn uniform_logits_give_ln_class_count() {
        let classifier = JointClassifier::from_weights(Array2::<f64>::zeros((10, 4))).unwrap();
        let features = Array2::from_shape_fn((3, 4), |(i, j)| (i + j) as f64);
        let out = id_loss(&features, &[0, 5, 9], &classifier).unwrap();
        assert!((out.loss - LN_10).abs() < 1e-12);
    }

    #[test]
    fn two_class_logits_match_closed_form() {
        // W rows (1, 0) and (0, 0) with f = (2, 0): logits (2, 0), target 0.
        let w = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let classifier = JointClassifier::from_weights(w).unwrap();
        let features = Array2::from_shape_vec((1, 2), vec![2.0, 0.0]).unwrap();
        let out = id_loss(&features, &[0], &classifier).unwrap();
        assert!((out.loss - LN_1P_EXP_NEG2).abs() < 1e-12);

        // dZ = softmax − one-hot; dW = dZᵀ f.
        let p0 = 1.0 / (1.0 + (-2.0f64).exp());
        let expected_dw00 = (p0 - 1.0) * 2.0;
        assert!((out.grad_w[[0, 0]] - expected_dw00).abs() < 1e-12);
        let expected_dw10 = (1.0 - p0) * 2.0;
        assert!((out.grad_w[[1, 0]] - expected_dw10).abs() < 1e-12);
        // dF = dZ · W: row = (p0−1)·w0 + (1−p0)·w1.
        assert!((out.grad_features[[0, 0]] - (p0 - 1.0)).abs() < 1e-12);
        assert!((out.grad_features[[0, 1]]).abs() < 1e-12);
    }

    #[test]
    fn identical_batch_items_average_to_single_item_loss() {
        let classifier = JointClassifier::<f64>::new_seeded(5, 3, 1);
        let row = Array2::from_shape_vec((1, 3), vec![0.3, -0.7, 1.1]).unwrap();
        let single = id_loss(&row, &[2], &classifier).unwrap();
        let mut batch = Array2::zeros((6, 3));
        for mut r in batch.rows_mut() {
            r.assign(&row.row(0));
        }
        let many = id_loss(&batch, &[2; 6], &classifier).unwrap();
        assert!((many.loss - single.loss).abs() < 1e-12);
    }

    #[test]
    fn large_logits_stay_finite_via_log_sum_exp() {
        // Logits (1000, 0): naive exp overflows; the shifted form gives
        // loss 1000 for target 1 and ~0 for target 0.
        let w = Array2::from_shape_vec((2, 1), vec![1.0f64, 0.0]).unwrap();
        let classifier = JointClassifier::from_weights(w).unwrap();
        let features = Array2::from_shape_vec((1, 1), vec![1000.0]).unwrap();
        let hit = id_loss(&features, &[0], &classifier).unwrap();
        assert!(hit.loss.is_finite());
        assert!(hit.loss.abs() < 1e-12);
        let miss = id_loss(&features, &[1], &classifier).unwrap();
        assert!((miss.loss - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn loss_rejects_bad_labels_and_empty_batches() {
        let classifier = JointClassifier::new_seeded(3, 2, 1);
        let features = Array2::<f64>::zeros((2, 2));
        assert!(matches!(
            id_loss(&features, &[0, 3], &classifier),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(matches!(
            id_loss(&empty, &[], &classifier),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn strategy_table_rows_are_transcribed() {
        let s1 = apply_strategy(1).unwrap();
        assert_eq!(s1.vision, GroupPlan { init: InitSource::TaskPretrained, stage1_learnable: false });
        assert_eq!(s1.language, GroupPlan { init: InitSource::TaskPretrained, stage1_learnable: false });
        let s2 = apply_strategy(2).unwrap();
        assert!(s2.vision.stage1_learnable && s2.language.stage1_learnable);
        assert_eq!(s2.vision.init, InitSource::TaskPretrained);
        let s3 = apply_strategy(3).unwrap();
        assert!(!s3.vision.stage1_learnable && s3.language.stage1_learnable);
        let s4 = apply_strategy(4).unwrap();
        assert_eq!(s4.vision, GroupPlan { init: InitSource::AuxiliaryPretrained, stage1_learnable: false });
        assert_eq!(s4.language, GroupPlan { init: InitSource::Random, stage1_learnable: true });
        let s5 = apply_strategy(5).unwrap();
        assert_eq!(s5.vision, GroupPlan { init: InitSource::Random, stage1_learnable: true });
        assert_eq!(s5.language, GroupPlan { init: InitSource::TaskPretrained, stage1_learnable: false });
        for plan in [s1, s2, s3, s4, s5] {
            assert_eq!(plan.fc, GroupPlan { init: InitSource::Random, stage1_learnable: true });
        }
        assert!(matches!(apply_strategy(0), Err(Error::UnknownStrategy { id: 0 })));
        assert!(matches!(apply_strategy(6), Err(Error::UnknownStrategy { id: 6 })));
    }

    #[test]
    fn pretrained_inits_require_their_checkpoints() {
        let arch = tiny_arch(8, 6, 5, 4);
        let plan = apply_strategy(1).unwrap();
        let err = init_joint_model::<f64>(&arch, 20, 5, &plan, &PretrainedStore::default(), 3);
        assert!(matches!(err, Err(Error::MissingInitCheckpoint { .. })));
    }

    #[test]
    fn pretrained_vision_copies_body_but_not_head() {
        let arch = tiny_arch(8, 6, 5, 4);
        let donor = Encoder::<f64>::vision(8, &arch.vision, 99).unwrap();
        let store = PretrainedStore {
            vision_task: Some(donor.clone()),
            ..Default::default()
        };
        let plan = StrategyPlan::custom(
            GroupPlan { init: InitSource::TaskPretrained, stage1_learnable: false },
            GroupPlan { init: InitSource::Random, stage1_learnable: true },
        );
        let model = init_joint_model::<f64>(&arch, 20, 5, &plan, &store, 3).unwrap();
        let head = model.vision.head_start();
        assert_eq!(model.vision.params_digest(0, head), donor.params_digest(0, head));
        assert_ne!(
            model.vision.params_digest(head, model.vision.layer_count()),
            donor.params_digest(head, donor.layer_count())
        );
    }

    /// Replays a step's forward passes on a clone and predicts the
    /// classifier update via two independent single-loss backward passes.
    fn predict_classifier<F: Scalar>(
        model: &JointModel<F>,
        images: &Batch<F>,
        tokens: &[TokenSequence],
        labels: &[u32],
        step: &StepConfig<F>,
        oracle_velocity: &mut Array2<F>,
        rng_v: &mut ChaCha8Rng,
        rng_l: &mut ChaCha8Rng,
    ) -> Array2<F> {
        let (f_img, _) = model.vision.forward(images, Mode::Train, Some(rng_v)).unwrap();
        let lang = model.embed_tokens(tokens).unwrap();
        let (f_txt, _) = model.language.forward(&lang, Mode::Train, Some(rng_l)).unwrap();
        let g_img = id_loss(&f_img, labels, &model.classifier).unwrap().grad_w;
        let g_txt = id_loss(&f_txt, labels, &model.classifier).unwrap().grad_w;
        let half = cast::<F>(0.5);
        let combined = (&g_img * step.lambda1 + &g_txt * step.lambda2) * half;
        let mut predicted = model.classifier.weights().clone();
        ndarray::Zip::from(&mut predicted)
            .and(&combined)
            .and(oracle_velocity)
            .for_each(|p, &g, v| {
                *v = step.momentum * *v + g;
                *p = *p - step.lr * *v;
            });
        predicted
    }

    fn step_fixture(seed: u64) -> (JointModel<f64>, TrainingSet<f64>) {
        let (set, dict, classes) = tiny_training_set(8, 2, 8);
        let arch = tiny_arch(8, 8, 5, 4);
        let model = init_joint_model::<f64>(
            &arch,
            dict.vocab_size(),
            classes,
            &random_plan(),
            &PretrainedStore::default(),
            seed,
        )
        .unwrap();
        (model, set)
    }

    #[test]
    fn classifier_update_is_half_image_gradient_when_lambda2_zero() {
        let (mut model, set) = step_fixture(5);
        let mut velocity = Velocities::zero(&model);
        let batch: Vec<usize> = (0..6).collect();
        let images = assemble_vision_batch(&set, &batch);
        let tokens: Vec<TokenSequence> = batch.iter().map(|&i| set.tokens[set.text_choices[i][0]].clone()).collect();
        let labels: Vec<u32> = batch.iter().map(|&i| set.labels[i]).collect();
        let step = StepConfig { lambda1: 1.0, lambda2: 0.0, lr: 0.05, momentum: 0.0 };

        let mut rv = substream(1, "step-v");
        let mut rl = substream(1, "step-l");
        let mut oracle_vel = Array2::zeros(model.classifier.weights().dim());
        let predicted = predict_classifier(
            &model, &images, &tokens, &labels, &step, &mut oracle_vel,
            &mut rv.clone(), &mut rl.clone(),
        );
        joint_step(
            &mut model, &mut velocity, &images, &tokens, &labels, &step,
            &FreezePlan::all_learnable(), &mut rv, &mut rl,
        )
        .unwrap();
        assert_eq!(model.classifier.weights(), &predicted);
    }

    #[test]
    fn ten_steps_of_classifier_updates_match_double_backward_oracle() {
        let (mut model, set) = step_fixture(7);
        let mut velocity = Velocities::zero(&model);
        let step = StepConfig { lambda1: 0.7, lambda2: 1.3, lr: 0.02, momentum: 0.9 };
        let mut oracle_vel = Array2::zeros(model.classifier.weights().dim());
        for t in 0..10u64 {
            let mut shuffle = substream(100 + t, "batch");
            let batch = plan_epoch(set.len(), 6, &mut shuffle).remove(0);
            let images = assemble_vision_batch(&set, &batch);
            let mut pick = substream(200 + t, "pick");
            let mut aug = substream(300 + t, "aug");
            let texts = assemble_text_batch(&set, &batch, &mut pick, &mut aug, 0.2, true).unwrap();
            let labels: Vec<u32> = batch.iter().map(|&i| set.labels[i]).collect();
            let mut rv = substream(400 + t, "v");
            let mut rl = substream(500 + t, "l");
            let predicted = predict_classifier(
                &model, &images, &texts, &labels, &step, &mut oracle_vel,
                &mut rv.clone(), &mut rl.clone(),
            );
            joint_step(
                &mut model, &mut velocity, &images, &texts, &labels, &step,
                &FreezePlan::all_learnable(), &mut rv, &mut rl,
            )
            .unwrap();
            let max_diff = model
                .classifier
                .weights()
                .iter()
                .zip(predicted.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_diff < 1e-10, "step {t}: max diff {max_diff}");
        }
    }

    #[test]
    fn updates_are_invariant_to_sample_order_within_a_batch() {
        let (model, set) = step_fixture(9);
        let step = StepConfig { lambda1: 1.0, lambda2: 1.0, lr: 0.05, momentum: 0.0 };
        let forward = |order: &[usize]| -> JointModel<f64> {
            let mut m = model.clone();
            let mut velocity = Velocities::zero(&m);
            let images = assemble_vision_batch(&set, order);
            let tokens: Vec<TokenSequence> =
                order.iter().map(|&i| set.tokens[set.text_choices[i][0]].clone()).collect();
            let labels: Vec<u32> = order.iter().map(|&i| set.labels[i]).collect();
            let mut rv = substream(1, "v");
            let mut rl = substream(1, "l");
            joint_step(
                &mut m, &mut velocity, &images, &tokens, &labels, &step,
                &FreezePlan::all_learnable(), &mut rv, &mut rl,
            )
            .unwrap();
            m
        };
        let a = forward(&[0, 1, 2, 3, 4, 5]);
        let b = forward(&[5, 3, 1, 4, 0, 2]);
        let diff = a
            .classifier
            .weights()
            .iter()
            .zip(b.classifier.weights().iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(diff < 1e-10, "classifier differs by {diff}");
        let emb_diff = a
            .embedding
            .table()
            .iter()
            .zip(b.embedding.table().iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(emb_diff < 1e-10, "embedding differs by {emb_diff}");
    }

    #[test]
    fn frozen_groups_stay_bitwise_stable_through_a_stage() {
        let (set, dict, classes) = tiny_training_set(8, 2, 8);
        let arch = tiny_arch(8, 8, 5, 4);
        let donor_v = Encoder::<f64>::vision(8, &arch.vision, 77).unwrap();
        let donor_l = Encoder::<f64>::language(8, 5, &arch.language, 78).unwrap();
        let donor_e = EmbeddingTable::<f64>::new_seeded(dict.vocab_size(), 5, 79);
        let store = PretrainedStore {
            vision_task: Some(donor_v),
            language_task: Some((donor_l, donor_e)),
            ..Default::default()
        };
        let plan = apply_strategy(1).unwrap(); // both frozen in stage 1
        let mut model =
            init_joint_model::<f64>(&arch, dict.vocab_size(), classes, &plan, &store, 3).unwrap();
        let head = model.vision.head_start();
        let body_before = model.vision.params_digest(0, head);
        let lang_before = model.language.params_digest(0, model.language.layer_count());
        let emb_before = embedding_digest(&model.embedding);
        let head_before = model.vision.params_digest(head, model.vision.layer_count());

        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 5,
            learning_rate: 0.05,
            strategy: 1,
            seed: 4,
            ..TrainConfig::default()
        };
        run_stage::<f64, Vec<u8>>(&mut model, &set, &cfg, &plan, None).unwrap();

        assert_eq!(model.vision.params_digest(0, head), body_before);
        assert_eq!(model.language.params_digest(0, model.language.layer_count()), lang_before);
        assert_eq!(embedding_digest(&model.embedding), emb_before);
        // The FC group did train.
        assert_ne!(model.vision.params_digest(head, model.vision.layer_count()), head_before);
    }

    /// Eval-mode training-set accuracy of the vision branch.
    fn vision_accuracy(encoder: &Encoder<f64>, classifier: &JointClassifier<f64>, set: &TrainingSet<f64>) -> f64 {
        let batch = Batch::from_vectors(set.vision.clone());
        let f = encoder.forward_eval(&batch).unwrap();
        let out = id_loss(&f, &set.labels, classifier).unwrap();
        out.correct as f64 / set.labels.len() as f64
    }

    /// Eval-mode training-set accuracy of the language branch over every
    /// description, unaugmented.
    fn language_accuracy(
        encoder: &Encoder<f64>,
        embedding: &EmbeddingTable<f64>,
        classifier: &JointClassifier<f64>,
        set: &TrainingSet<f64>,
    ) -> f64 {
        let mats: Vec<Array2<f64>> = set.tokens.iter().map(|t| embedding.embed(t).unwrap()).collect();
        let lengths = set.tokens.iter().map(|t| t.true_length).collect();
        let batch = Batch::from_matrices(&mats, Some(lengths)).unwrap();
        let f = encoder.forward_eval(&batch).unwrap();
        let out = id_loss(&f, &set.token_labels, classifier).unwrap();
        out.correct as f64 / set.token_labels.len() as f64
    }

    #[test]
    fn separable_data_reaches_full_training_accuracy() {
        let (mut model, set) = step_fixture(13);
        let plan = random_plan();
        let cfg = TrainConfig {
            epochs: 80,
            batch_size: 8,
            learning_rate: 0.08,
            decay_period: 50,
            word_drop_prob: 0.0,
            zero_shift: false,
            seed: 6,
            ..TrainConfig::default()
        };
        let records = run_stage::<f64, Vec<u8>>(&mut model, &set, &cfg, &plan, None).unwrap();
        assert!(records[0].l_img.is_finite() && records[0].l_txt.is_finite());
        // Both losses fall below chance level within the first epochs.
        let ln_classes = (set.classes as f64).ln();
        assert!(records.iter().take(8).any(|r| r.l_img < ln_classes && r.l_txt < ln_classes));
        assert_eq!(vision_accuracy(&model.vision, &model.classifier, &set), 1.0);
        assert_eq!(language_accuracy(&model.language, &model.embedding, &model.classifier, &set), 1.0);
    }

    #[test]
    fn epoch_records_serialize_with_loss_field_names() {
        let record = EpochRecord {
            epoch: 3,
            l_img: 1.5,
            l_txt: 2.5,
            total: 4.0,
            lr: 0.01,
            acc_img: 0.5,
            acc_txt: 0.25,
        };
        let json = serde_json::to_string(&record).unwrap();
        assert!(json.contains("\"L_img\":1.5"));
        assert!(json.contains("\"L_txt\":2.5"));
        assert!(json.contains("\"epoch\":3"));
    }

    #[test]
    fn lambda1_zero_equals_text_only_training_with_halved_classifier_lr() {
        let (model, set) = step_fixture(17);
        let cfg = TrainConfig {
            lambda1: 0.0,
            lambda2: 1.0,
            epochs: 2,
            batch_size: 5,
            learning_rate: 0.04,
            word_drop_prob: 0.3,
            zero_shift: true,
            seed: 21,
            ..TrainConfig::default()
        };

        // Joint trainer with the vision loss switched off.
        let mut joint = model.clone();
        run_stage::<f64, Vec<u8>>(&mut joint, &set, &cfg, &random_plan(), None).unwrap();

        // Independent text-only loop: same substreams, plain gradient on
        // its own classifier at half the learning rate.
        let mut language = model.language.clone();
        let mut embedding = model.embedding.clone();
        let mut classifier = model.classifier.clone();
        let mut vel_enc = language.zero_grads();
        let mut vel_emb = Array2::zeros(embedding.table().dim());
        let mut vel_cls = Array2::zeros(classifier.weights().dim());
        for epoch in 0..cfg.epochs {
            let lr = cfg.lr_at(epoch);
            let momentum = cfg.momentum;
            let mut shuffle = stage_stream(cfg.seed, "shuffle", cfg.stage, epoch);
            let mut pick = stage_stream(cfg.seed, "textpick", cfg.stage, epoch);
            let mut aug = stage_stream(cfg.seed, "textaug", cfg.stage, epoch);
            let mut rng_l = stage_stream(cfg.seed, "lang-dropout", cfg.stage, epoch);
            for batch in plan_epoch(set.len(), cfg.batch_size, &mut shuffle) {
                let texts = assemble_text_batch(&set, &batch, &mut pick, &mut aug, cfg.word_drop_prob, cfg.zero_shift)
                    .unwrap();
                let labels: Vec<u32> = batch.iter().map(|&i| set.labels[i]).collect();
                let mats: Vec<Array2<f64>> =
                    texts.iter().map(|t| embedding.embed(t).unwrap()).collect();
                let lengths = texts.iter().map(|t| t.true_length).collect();
                let lang_batch = Batch::from_matrices(&mats, Some(lengths)).unwrap();
                let (f, trace) = language.forward(&lang_batch, Mode::Train, Some(&mut rng_l)).unwrap();
                let out = id_loss(&f, &labels, &classifier).unwrap();
                classifier.sgd_step(&out.grad_w, &mut vel_cls, lr / 2.0, momentum);
                let (grads, input_grad) = language.backward(&trace, &out.grad_features).unwrap();
                language.sgd_step(&grads, &mut vel_enc, lr, momentum, 0);
                language.update_running_stats(&trace, 0);
                let mut grad_emb = Array2::zeros(embedding.table().dim());
                for (i, seq) in texts.iter().enumerate() {
                    embedding.accumulate_grad(seq, &input_grad.slice(s![i, .., ..]), &mut grad_emb);
                }
                embedding.sgd_step(&grad_emb, &mut vel_emb, lr, momentum);
            }
        }

        let lang_digest = |e: &Encoder<f64>| e.params_digest(0, e.layer_count());
        assert_eq!(lang_digest(&joint.language), lang_digest(&language));
        assert_eq!(embedding_digest(&joint.embedding), embedding_digest(&embedding));
        let max_diff = joint
            .classifier
            .weights()
            .iter()
            .zip(classifier.weights().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-14, "classifier halves diverged by {max_diff}");
    }

    #[test]
    fn config_validation_rejects_bad_hyperparameters() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        assert!(TrainConfig { lambda1: 0.0, lambda2: 0.0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { lambda1: -0.5, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { momentum: 1.0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { decay_factor: 0.0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { strategy: 6, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { stage: 3, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..ok }.validate().is_err());
    }

    #[test]
    fn learning_rate_follows_step_decay() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            decay_factor: 0.1,
            decay_period: 20,
            ..TrainConfig::default()
        };
        assert!((cfg.lr_at(0) - 0.1).abs() < 1e-15);
        assert!((cfg.lr_at(19) - 0.1).abs() < 1e-15);
        assert!((cfg.lr_at(20) - 0.01).abs() < 1e-15);
        assert!((cfg.lr_at(40) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn single_modality_trainers_learn_their_branch() {
        let (set, dict, classes) = tiny_training_set(6, 2, 8);
        let arch = tiny_arch(8, 8, 5, 4);
        let mut vision = Encoder::<f64>::vision(8, &arch.vision, 31).unwrap();
        let mut cls_v = JointClassifier::<f64>::new_seeded(classes, 4, 31);
        let cfg = TrainConfig {
            epochs: 60,
            batch_size: 6,
            learning_rate: 0.08,
            decay_period: 40,
            word_drop_prob: 0.0,
            zero_shift: false,
            seed: 8,
            ..TrainConfig::default()
        };
        train_vision_only(&mut vision, &mut cls_v, &set, &cfg).unwrap();
        assert!(vision_accuracy(&vision, &cls_v, &set) > 0.9);

        let mut language = Encoder::<f64>::language(8, 5, &arch.language, 32).unwrap();
        let mut embedding = EmbeddingTable::<f64>::new_seeded(dict.vocab_size(), 5, 32);
        let mut cls_l = JointClassifier::<f64>::new_seeded(classes, 4, 32);
        train_language_only(&mut language, &mut embedding, &mut cls_l, &set, &cfg).unwrap();
        assert!(language_accuracy(&language, &embedding, &cls_l, &set) > 0.9);
    }
}
