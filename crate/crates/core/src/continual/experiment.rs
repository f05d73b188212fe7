//! Whole-stream runs: backbone pre-training, the continual loop with metric
//! records, the ablation ladder and the noise sweep.

use log::info;
use serde::{Deserialize, Serialize};

use super::metrics::{faa_caa, AccuracyMatrix};
use super::stream::{generate_task_stream, StreamSpec};
use super::train::{evaluate, train_task, usage_entropies, EpochLoss, LearnerState, TrainHyper};
use crate::error::{Error, Result};
use crate::model::{
    classify_on_tape, forward_on_tape, Backbone, BackboneNodes, ClassifierHead, Model,
    ModelConfig, PromptLeaves, PromptScoring, Router, SelectK,
};
use crate::numerics::{cosine_lr, Adam, Matrix, Rng, Tape};
use crate::objectives::LossWeights;
use crate::prefix_moe::PromptBlock;
use crate::routing::{mean_usage_entropy, Mode, NoiseConfig};

/// The held-out problem the backbone is trained on before it is frozen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for PretrainSpec {
    fn default() -> Self {
        PretrainSpec {
            classes: 8,
            samples_per_class: 60,
            epochs: 4,
            lr: 2e-3,
            batch_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinualConfig {
    pub model: ModelConfig,
    pub stream: StreamSpec,
    pub train: TrainHyper,
    pub pretrain: PretrainSpec,
}

impl ContinualConfig {
    /// The reference stream with the full method.
    pub fn reference() -> Self {
        let stream = StreamSpec::default();
        let model = ModelConfig {
            tokens: stream.tokens + 1,
            raw_dim: stream.token_dim,
            ..ModelConfig::default()
        };
        ContinualConfig {
            model,
            stream,
            train: TrainHyper::default(),
            pretrain: PretrainSpec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.stream.validate()?;
        self.train.validate()?;
        if self.model.tokens != self.stream.tokens + 1 || self.model.raw_dim != self.stream.token_dim {
            return Err(Error::Config(format!(
                "model expects {} tokens of width {}, stream yields {} (+ class token) of width {}",
                self.model.tokens, self.model.raw_dim, self.stream.tokens, self.stream.token_dim
            )));
        }
        Ok(())
    }
}

const PRETRAIN_STREAM: u64 = 0x5eed_0001;
const MODEL_STREAM: u64 = 2;
const TRAIN_STREAM: u64 = 3;

/// Trains embedding, blocks and a throwaway head on a held-out synthetic
/// problem drawn from the same family as the stream, then returns the backbone.
pub fn pretrain_backbone(cfg: &ContinualConfig, seed: u64) -> Result<Backbone> {
    cfg.validate()?;
    let root = Rng::new(seed).fork(PRETRAIN_STREAM);
    let mut rng = root.fork(0);
    let backbone = Backbone::new(&cfg.model, &mut rng)?;
    let spec = &cfg.pretrain;
    if spec.epochs == 0 || spec.classes == 0 {
        return Ok(backbone);
    }
    let problem = StreamSpec {
        tasks: 1,
        classes_per_task: spec.classes,
        train_per_class: spec.samples_per_class,
        val_per_class: 0,
        test_per_class: 1,
        ..cfg.stream.clone()
    };
    let data = generate_task_stream(&problem, root.fork(1).seed() ^ seed.rotate_left(17))?;
    let samples = &data.tasks[0].train;
    let plain = ModelConfig {
        prompt_layers: 0,
        ..cfg.model.clone()
    };
    let mut model = Model::new(plain, backbone, &mut rng)?;
    model.head = ClassifierHead::new(cfg.model.embed_dim);
    model.head.grow_to(spec.classes)?;
    model.head.weight = rng.normal_matrix(spec.classes, cfg.model.embed_dim, 0.02);
    let active: Vec<usize> = (0..spec.classes).collect();
    let shapes: Vec<(usize, usize)> = model
        .backbone
        .named_params()
        .iter()
        .map(|(_, m)| m.shape())
        .chain([model.head.weight.shape(), model.head.bias.shape()])
        .collect();
    let mut opt = Adam::new(&shapes);
    let batch = spec.batch_size.max(1);
    let total = samples.len().div_ceil(batch) * spec.epochs;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut step = 0;
    let mut noise_rng = Rng::new(0);
    for epoch in 0..spec.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let mut grads: Vec<Matrix> = shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
            let inv = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let s = &samples[i];
                let mut tape = Tape::new();
                let bb = BackboneNodes::record(&mut tape, &model.backbone, true);
                let pl = PromptLeaves::record(&mut tape, &model.prompts, false);
                let hw = tape.leaf(&model.head.weight, true);
                let hb = tape.leaf(&model.head.bias, true);
                let mut router = Router {
                    mode: Mode::Train,
                    noise: NoiseConfig::off(),
                    rng: &mut noise_rng,
                    replay: None,
                };
                let f = forward_on_tape(&mut tape, &model, &bb, &pl, &s.input, &mut router)?;
                let logits = classify_on_tape(&mut tape, hw, hb, f.z)?;
                let loss = tape.cross_entropy(logits, s.label, &active)?;
                epoch_loss += tape.value(loss).item();
                let mut g = tape.backward(loss)?;
                for (slot, v) in grads.iter_mut().zip(bb.all.iter().copied().chain([hw, hb])) {
                    if let Some(gv) = g.take(v) {
                        slot.axpy(inv, &gv)?;
                    }
                }
            }
            let lr = cosine_lr(spec.lr, step, total);
            let mut params = model.backbone.params_mut();
            params.push(&mut model.head.weight);
            params.push(&mut model.head.bias);
            opt.step(&mut params, &grads, lr)?;
            step += 1;
        }
        info!(
            "backbone pre-training epoch {}: loss {:.4}",
            epoch + 1,
            epoch_loss / samples.len() as f64
        );
    }
    Ok(model.backbone)
}

/// One JSON-lines record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricsRecord {
    Task {
        seed: u64,
        /// One-based.
        task: usize,
        accuracies: Vec<f64>,
        average: f64,
        losses: Vec<EpochLoss>,
        tap_losses: Vec<f64>,
        /// Per layer, per head; null where no routing was recorded.
        entropy: Vec<Vec<Option<f64>>>,
    },
    Final {
        seed: u64,
        faa: f64,
        caa: f64,
        mean_entropy: Option<f64>,
    },
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub seed: u64,
    pub accuracy: AccuracyMatrix,
    pub faa: f64,
    pub caa: f64,
    pub mean_entropy: Option<f64>,
    pub prompts: Vec<PromptBlock>,
    pub model: Model,
}

/// Runs the whole stream for one seed on a given frozen backbone.
pub fn run_continual(
    cfg: &ContinualConfig,
    seed: u64,
    backbone: &Backbone,
    sink: &mut dyn FnMut(&MetricsRecord) -> Result<()>,
) -> Result<RunOutput> {
    cfg.validate()?;
    let stream = generate_task_stream(&cfg.stream, seed)?;
    let root = Rng::new(seed);
    let model = Model::new(cfg.model.clone(), backbone.clone(), &mut root.fork(MODEL_STREAM))?;
    let mut state = LearnerState::new(model);
    let mut rng = root.fork(TRAIN_STREAM);
    let mut acc = AccuracyMatrix::default();
    for (t, task) in stream.tasks.iter().enumerate() {
        let report = train_task(&mut state, task, &cfg.train, &mut rng)?;
        let row = evaluate(&state.model, &stream.tasks[..=t])?;
        let average = row.iter().sum::<f64>() / row.len() as f64;
        acc.push_row(row.clone())?;
        info!("seed {} after task {}: A = {:.4}", seed, t + 1, average);
        sink(&MetricsRecord::Task {
            seed,
            task: t + 1,
            accuracies: row,
            average,
            losses: report.epochs,
            tap_losses: report.tap_losses,
            entropy: usage_entropies(&state.model),
        })?;
    }
    let (faa, caa) = faa_caa(&acc)?;
    let mean_entropy = mean_usage_entropy(&state.model.prompts).ok();
    sink(&MetricsRecord::Final {
        seed,
        faa,
        caa,
        mean_entropy,
    })?;
    Ok(RunOutput {
        seed,
        accuracy: acc,
        faa,
        caa,
        mean_entropy,
        prompts: state.model.prompts.clone(),
        model: state.model,
    })
}

/// Rows of the ablation ladder, each adding one component to the previous.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationStage {
    OnePrompt,
    ScoreAggregation,
    SparseSelection,
    AdaptiveNoise,
    TaskAdaptivePrediction,
    DenseWarmup,
    RouterLoss,
    PrototypeLoss,
}

impl AblationStage {
    pub const ALL: [AblationStage; 8] = [
        AblationStage::OnePrompt,
        AblationStage::ScoreAggregation,
        AblationStage::SparseSelection,
        AblationStage::AdaptiveNoise,
        AblationStage::TaskAdaptivePrediction,
        AblationStage::DenseWarmup,
        AblationStage::RouterLoss,
        AblationStage::PrototypeLoss,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationStage::OnePrompt => "One Prompt",
            AblationStage::ScoreAggregation => "+ Prompt Score Aggregation",
            AblationStage::SparseSelection => "+ Sparse Expert Selection",
            AblationStage::AdaptiveNoise => "+ Adaptive Noise",
            AblationStage::TaskAdaptivePrediction => "+ Task-Adaptive Prediction",
            AblationStage::DenseWarmup => "+ Initial Dense Training",
            AblationStage::RouterLoss => "+ Router Loss",
            AblationStage::PrototypeLoss => "+ Prototype Loss",
        }
    }

    fn rank(self) -> usize {
        AblationStage::ALL.iter().position(|&s| s == self).unwrap_or(0)
    }

    /// `full` with every component after this stage removed.
    pub fn configure(self, full: &ContinualConfig) -> ContinualConfig {
        let r = self.rank();
        let mut cfg = full.clone();
        let has = |s: AblationStage| r >= s.rank();
        if !has(AblationStage::ScoreAggregation) {
            cfg.model.scoring = PromptScoring::PerToken;
        }
        if !has(AblationStage::SparseSelection) {
            cfg.model.select_k = SelectK::Dense;
        }
        if !has(AblationStage::AdaptiveNoise) {
            cfg.train.noise = NoiseConfig::off();
        }
        if !has(AblationStage::TaskAdaptivePrediction) {
            cfg.train.tap = false;
        }
        if !has(AblationStage::DenseWarmup) {
            cfg.train.dense_warmup = false;
        }
        let full_w = full.train.weights;
        cfg.train.weights = LossWeights {
            router: if has(AblationStage::RouterLoss) { full_w.router } else { 0.0 },
            proto: if has(AblationStage::PrototypeLoss) { full_w.proto } else { 0.0 },
        };
        cfg
    }
}

/// `cfg` with the noise magnitude replaced.
pub fn with_epsilon(cfg: &ContinualConfig, epsilon: f64) -> ContinualConfig {
    let mut out = cfg.clone();
    out.train.noise.epsilon = epsilon;
    out
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}
