//! One task of the training procedure: optional dense warmup, sparse training
//! on the combined objective, class statistics, task-adaptive prediction and
//! the post-task usage pass.

use std::collections::BTreeMap;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use super::gaussian::{estimate_class_gaussians, tap_refine, ClassGaussian, TapSettings};
use super::stream::{Sample, Task};
use crate::error::{Error, Result};
use crate::model::{
    classify, classify_on_tape, forward_on_tape, represent, BackboneNodes, Model, PromptLeaves,
    PromptScoring, Router, SelectK,
};
use crate::numerics::{cosine_lr, Adam, Matrix, Rng, Tape};
use crate::objectives::{
    build_prototype_set, prototype_loss_on_tape, router_loss_on_tape, LossWeights, PrototypeSet,
};
use crate::prefix_moe::{PromptBlock, RoutingDecision};
use crate::routing::{update_usage, usage_entropy, Mode, NoiseConfig};

/// Classes whose logits enter the training cross-entropy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CeScope {
    /// Every class seen so far.
    Seen,
    /// Only the classes of the task being trained.
    Task,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    /// `E`: sparse epochs per task; the warmup runs `E / 2`, TAP runs `E`.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub noise: NoiseConfig,
    pub weights: LossWeights,
    pub dense_warmup: bool,
    pub tap: bool,
    pub tap_samples_per_class: usize,
    pub tap_lr: f64,
    pub ce_scope: CeScope,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            epochs: 6,
            batch_size: 32,
            lr: 1e-3,
            noise: NoiseConfig::adaptive(0.4),
            weights: LossWeights {
                router: 0.05,
                proto: 0.05,
            },
            dense_warmup: true,
            tap: true,
            tap_samples_per_class: 64,
            tap_lr: 1e-2,
            ce_scope: CeScope::Seen,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        self.weights.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        for (name, v) in [("lr", self.lr), ("tap_lr", self.tap_lr)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{} must be positive", name)));
            }
        }
        if self.tap && self.tap_samples_per_class == 0 {
            return Err(Error::Config("tap_samples_per_class must be positive".into()));
        }
        Ok(())
    }
}

/// Everything a learner carries from task to task.
#[derive(Clone, Debug)]
pub struct LearnerState {
    pub model: Model,
    pub gaussians: BTreeMap<usize, ClassGaussian>,
    /// Prompts as they were at the start of the current task (tasks after the first).
    pub previous_prompts: Option<Vec<PromptBlock>>,
    pub prototypes: PrototypeSet,
    pub tasks_trained: usize,
}

impl LearnerState {
    pub fn new(model: Model) -> Self {
        let prototypes = PrototypeSet::empty(model.config.prompt_layers, model.config.embed_dim);
        LearnerState {
            model,
            gaussians: BTreeMap::new(),
            previous_prompts: None,
            prototypes,
            tasks_trained: 0,
        }
    }

    pub fn trainable_shapes(&self) -> Vec<(usize, usize)> {
        trainable(&self.model).iter().map(|m| m.shape()).collect()
    }
}

/// Prompt keys and values per layer, then head weight and bias.
pub fn trainable(model: &Model) -> Vec<&Matrix> {
    let mut out = Vec::new();
    for p in &model.prompts {
        out.push(&p.keys);
        out.push(&p.values);
    }
    out.push(&model.head.weight);
    out.push(&model.head.bias);
    out
}

pub fn trainable_mut(model: &mut Model) -> Vec<&mut Matrix> {
    let mut out = Vec::new();
    for p in &mut model.prompts {
        out.push(&mut p.keys);
        out.push(&mut p.values);
    }
    out.push(&mut model.head.weight);
    out.push(&mut model.head.bias);
    out
}

/// Objective settings of one optimization phase.
#[derive(Clone, Copy, Debug)]
pub struct PhaseObjective {
    pub mode: Mode,
    pub noise: NoiseConfig,
    pub weights: LossWeights,
}

#[derive(Clone, Debug)]
pub struct BatchOutcome {
    pub loss: f64,
    pub ce: f64,
    pub router: f64,
    pub proto: f64,
    /// Same order as [`trainable`].
    pub grads: Vec<Matrix>,
    /// Routing of each sample, forward order.
    pub decisions: Vec<Vec<RoutingDecision>>,
}

/// Mean objective over `batch` with its gradient w.r.t. prompts and head:
/// `mean(ce) + α_router mean(router) + α_proto proto`.
///
/// `replay` pins each sample's routing and `proto_fixed` the prototype
/// selections, which makes the loss smooth for finite-difference checks.
pub fn batch_objective(
    state: &LearnerState,
    batch: &[&Sample],
    active: &[usize],
    phase: &PhaseObjective,
    rng: &mut Rng,
    replay: Option<&[Vec<RoutingDecision>]>,
    proto_fixed: Option<&[Vec<usize>]>,
) -> Result<BatchOutcome> {
    if batch.is_empty() {
        return Err(Error::Dimension("empty batch".into()));
    }
    let model = &state.model;
    let mut grads: Vec<Matrix> = trainable(model)
        .iter()
        .map(|m| Matrix::zeros(m.rows(), m.cols()))
        .collect();
    let inv = 1.0 / batch.len() as f64;
    let (mut ce_sum, mut router_sum) = (0.0, 0.0);
    let mut decisions = Vec::with_capacity(batch.len());
    for (i, sample) in batch.iter().enumerate() {
        let mut tape = Tape::new();
        let bb = BackboneNodes::record(&mut tape, &model.backbone, false);
        let pl = PromptLeaves::record(&mut tape, &model.prompts, true);
        let hw = tape.leaf(&model.head.weight, true);
        let hb = tape.leaf(&model.head.bias, true);
        let mut router = Router {
            mode: phase.mode,
            noise: phase.noise,
            rng,
            replay: replay.map(|r| r[i].as_slice()),
        };
        let f = forward_on_tape(&mut tape, model, &bb, &pl, &sample.input, &mut router)?;
        let logits = classify_on_tape(&mut tape, hw, hb, f.z)?;
        let ce = tape.cross_entropy(logits, sample.label, active)?;
        ce_sum += tape.value(ce).item();
        let mut loss = ce;
        if phase.weights.router != 0.0 {
            if let Some(r) = router_loss_on_tape(&mut tape, &f.proxies, &f.decisions)? {
                router_sum += tape.value(r).item();
                let scaled = tape.scale(r, phase.weights.router);
                loss = tape.add(loss, scaled)?;
            }
        }
        let l = tape.value(loss).item();
        if !l.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss of sample with label {}",
                sample.label
            )));
        }
        let mut g = tape.backward(loss)?;
        let leaves = pl
            .keys
            .iter()
            .zip(&pl.values)
            .flat_map(|(&k, &v)| [k, v])
            .chain([hw, hb]);
        for (slot, v) in grads.iter_mut().zip(leaves) {
            if let Some(gv) = g.take(v) {
                slot.axpy(inv, &gv)?;
            }
        }
        decisions.push(f.decisions);
    }
    let mut proto = 0.0;
    if phase.weights.proto != 0.0 && !state.prototypes.is_empty() {
        let mut tape = Tape::new();
        let keys: Vec<_> = model.prompts.iter().map(|p| tape.leaf(&p.keys, true)).collect();
        let k = model.config.active_experts();
        if let Some(p) = prototype_loss_on_tape(&mut tape, &state.prototypes, &keys, k, proto_fixed)? {
            proto = tape.value(p).item();
            let mut g = tape.backward(p)?;
            for (l, &kv) in keys.iter().enumerate() {
                if let Some(gv) = g.take(kv) {
                    grads[2 * l].axpy(phase.weights.proto, &gv)?;
                }
            }
        }
    }
    let ce = ce_sum * inv;
    let router = router_sum * inv;
    Ok(BatchOutcome {
        loss: ce + phase.weights.router * router + phase.weights.proto * proto,
        ce,
        router,
        proto,
        grads,
        decisions,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub phase: String,
    pub epoch: usize,
    pub total: f64,
    pub ce: f64,
    pub router: f64,
    pub proto: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: usize,
    pub epochs: Vec<EpochLoss>,
    pub tap_losses: Vec<f64>,
    pub prototypes: usize,
}

fn run_phase(
    state: &mut LearnerState,
    task: &Task,
    phase_name: &str,
    epochs: usize,
    phase: PhaseObjective,
    hyper: &TrainHyper,
    rng: &mut Rng,
    report: &mut Vec<EpochLoss>,
) -> Result<()> {
    let n = task.train.len();
    let steps_per_epoch = n.div_ceil(hyper.batch_size);
    let total_steps = steps_per_epoch * epochs;
    let mut opt = Adam::new(&state.trainable_shapes());
    let mut order: Vec<usize> = (0..n).collect();
    let active: Vec<usize> = match hyper.ce_scope {
        CeScope::Seen => (0..state.model.head.classes()).collect(),
        CeScope::Task => task.classes.clone(),
    };
    let mut step = 0;
    for epoch in 0..epochs {
        rng.shuffle(&mut order);
        let mut acc = EpochLoss {
            phase: phase_name.to_string(),
            epoch,
            total: 0.0,
            ce: 0.0,
            router: 0.0,
            proto: 0.0,
        };
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &task.train[i]).collect();
            let out = batch_objective(state, &batch, &active, &phase, rng, None, None)?;
            let w = chunk.len() as f64 / n as f64;
            acc.total += w * out.loss;
            acc.ce += w * out.ce;
            acc.router += w * out.router;
            acc.proto += w * out.proto;
            let lr = cosine_lr(hyper.lr, step, total_steps);
            opt.step(&mut trainable_mut(&mut state.model), &out.grads, lr)?;
            step += 1;
        }
        debug!(
            "task {} {} epoch {}: loss {:.4} (ce {:.4}, router {:.4}, proto {:.4})",
            task.index + 1,
            phase_name,
            epoch + 1,
            acc.total,
            acc.ce,
            acc.router,
            acc.proto
        );
        report.push(acc);
    }
    Ok(())
}

/// Representations and eval-mode routing of `samples`.
pub fn eval_pass(model: &Model, samples: &[Sample]) -> Result<(Vec<Matrix>, Vec<Vec<RoutingDecision>>)> {
    let mut zs = Vec::with_capacity(samples.len());
    let mut ds = Vec::with_capacity(samples.len());
    for s in samples {
        let out = represent(model, &s.input)?;
        zs.push(out.z);
        ds.push(out.decisions);
    }
    Ok((zs, ds))
}

/// Trains the learner on the next task. Only `task` is visible here.
pub fn train_task(
    state: &mut LearnerState,
    task: &Task,
    hyper: &TrainHyper,
    rng: &mut Rng,
) -> Result<TaskReport> {
    hyper.validate()?;
    if task.index != state.tasks_trained {
        return Err(Error::Config(format!(
            "task {} given after {} trained tasks",
            task.index + 1,
            state.tasks_trained
        )));
    }
    let first = state.tasks_trained == 0;
    if !first {
        let snapshot = state.model.prompts.clone();
        let keys: Vec<Matrix> = snapshot.iter().map(|p| p.keys.clone()).collect();
        let freqs: Vec<Vec<f64>> = snapshot.iter().map(|p| p.head_averaged_frequencies()).collect();
        state.prototypes = build_prototype_set(&keys, &freqs)?;
        state.previous_prompts = Some(snapshot);
    }
    let max_class = *task
        .classes
        .iter()
        .max()
        .ok_or_else(|| Error::Config("task without classes".into()))?;
    state.model.head.grow_to(max_class + 1)?;

    let mut epochs = Vec::new();
    let proxy = state.model.config.scoring == PromptScoring::Proxy;
    if first && hyper.dense_warmup && hyper.epochs / 2 > 0 {
        let configured = state.model.config.select_k;
        if proxy {
            state.model.config.select_k = SelectK::Dense;
        }
        let phase = PhaseObjective {
            mode: Mode::Train,
            noise: NoiseConfig::off(),
            weights: LossWeights::default(),
        };
        let r = run_phase(state, task, "dense", hyper.epochs / 2, phase, hyper, rng, &mut epochs);
        state.model.config.select_k = configured;
        r?;
    }
    let phase = PhaseObjective {
        mode: Mode::Train,
        noise: hyper.noise,
        weights: hyper.weights,
    };
    run_phase(state, task, "sparse", hyper.epochs, phase, hyper, rng, &mut epochs)?;

    // prompts are final from here on; one eval pass feeds statistics and usage
    let (zs, decisions) = eval_pass(&state.model, &task.train)?;
    let mut reps: BTreeMap<usize, Vec<Matrix>> = BTreeMap::new();
    for (z, s) in zs.into_iter().zip(&task.train) {
        reps.entry(s.label).or_default().push(z);
    }
    state.gaussians.extend(estimate_class_gaussians(&reps)?);

    let mut tap_losses = Vec::new();
    if hyper.tap {
        let settings = TapSettings {
            epochs: hyper.epochs,
            samples_per_class: hyper.tap_samples_per_class,
            batch_size: hyper.batch_size,
            lr: hyper.tap_lr,
        };
        tap_losses = tap_refine(&mut state.model.head, &state.gaussians, &settings, rng)?;
    }

    for (l, block) in state.model.prompts.iter_mut().enumerate() {
        update_usage(block, decisions.iter().flatten().filter(|d| d.layer == l))?;
    }
    state.tasks_trained += 1;
    info!(
        "task {} trained: {} epochs, final loss {:.4}",
        task.index + 1,
        epochs.len(),
        epochs.last().map(|e| e.total).unwrap_or(f64::NAN)
    );
    Ok(TaskReport {
        task: task.index,
        epochs,
        tap_losses,
        prototypes: state.prototypes.len(),
    })
}

/// Class-incremental accuracy on `samples`: argmax over every class the head knows.
pub fn accuracy(model: &Model, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for s in samples {
        let z = represent(model, &s.input)?.z;
        let logits = classify(&model.head, &z)?;
        let row = logits.row(0);
        let mut best = 0;
        for c in 1..row.len() {
            if row[c] > row[best] {
                best = c;
            }
        }
        if best == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// `S_{i,t}` for every task `i` up to the last trained one.
pub fn evaluate(model: &Model, tasks: &[Task]) -> Result<Vec<f64>> {
    tasks.iter().map(|t| accuracy(model, &t.test)).collect()
}

/// Usage entropy per (layer, head); `None` where nothing was recorded.
pub fn usage_entropies(model: &Model) -> Vec<Vec<Option<f64>>> {
    model
        .prompts
        .iter()
        .map(|p| {
            (0..p.usage.len())
                .map(|h| usage_entropy(&p.frequencies(h)).ok())
                .collect()
        })
        .collect()
}
