//! Continual training loop: per-task optimization of the adapter experts,
//! routers, and output head with replay from memory, router supervision via
//! gold task ids, gradient clipping, and a validation-plateau LR schedule.

use crate::audio::corpus::Task;
use crate::baselines::{agem_project, apply_ewc_grads, FisherEstimate, GradientBank};
use crate::audio::features::featurize;
use crate::audio::{synth_clip, AudioClip, AudioError, EventKind, EventLabel};
use crate::graph::{Graph, Var};
use crate::memory::{MemoryError, ReplayMemory};
use crate::model::{
    EncodedClip, ModelConfig, ModelError, MoeDecoderModel, RouterTrace, BOS_TOKEN, DECODE_MAX_LEN,
};
use crate::optim::{clip_gradients, AdamW};
use crate::rng::{derive_seed, Rng};
use crate::tensor::{cross_entropy_logits, NumericsError};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("train config: {0}")]
    Config(String),
    #[error("trainer state: {0}")]
    State(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the current-task loss against the memory loss.
    pub lambda: f64,
    /// Gate-loss coefficient.
    pub eta: f64,
    pub epochs_per_task: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub lr_decay_factor: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.5,
            eta: 0.1,
            epochs_per_task: 10,
            batch_size: 16,
            initial_lr: 1e-4,
            lr_decay_factor: 0.8,
            clip_norm: 5.0,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(TrainError::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.eta < 0.0 || !self.eta.is_finite() {
            return Err(TrainError::Config(format!("eta {} must be non-negative", self.eta)));
        }
        if self.epochs_per_task == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("epochs and batch size must be positive".into()));
        }
        if self.initial_lr <= 0.0 || !(0.0..=1.0).contains(&self.lr_decay_factor) {
            return Err(TrainError::Config("bad learning-rate schedule".into()));
        }
        if self.clip_norm <= 0.0 {
            return Err(TrainError::Config("clip norm must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub gate_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TaskRecord {
    pub task_id: usize,
    pub val_curve: Vec<f64>,
    pub final_lr: f64,
    pub wall_time_s: f64,
    pub epochs: Vec<EpochLog>,
}

/// L_data = lambda * L_task + (1 - lambda) * L_memory.
pub fn data_loss(task_loss: f64, memory_loss: f64, lambda: f64) -> Result<f64, TrainError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(TrainError::Config(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(lambda * task_loss + (1.0 - lambda) * memory_loss)
}

/// L_total = L_data + eta * L_gate.
pub fn total_loss(data: f64, gate: f64, eta: f64) -> f64 {
    data + eta * gate
}

/// Batch-mean cross-entropy of block-summed router logits against the gold
/// task's expert index.
pub fn gate_loss(traces: &[RouterTrace], golds: &[usize]) -> Result<f64, TrainError> {
    if traces.len() != golds.len() || traces.is_empty() {
        return Err(TrainError::State("traces and golds must align and be non-empty".into()));
    }
    let mut total = 0.0;
    for (trace, &gold) in traces.iter().zip(golds) {
        let n = trace.block_logits[0].len();
        if gold >= n {
            return Err(TrainError::State(format!("gold id {gold} >= expert count {n}")));
        }
        let mut summed = vec![0.0; n];
        for block in &trace.block_logits {
            if block.len() != n {
                return Err(TrainError::State("router logit lengths differ across blocks".into()));
            }
            for (s, l) in summed.iter_mut().zip(block) {
                *s += l;
            }
        }
        total += cross_entropy_logits(&summed, gold)?;
    }
    Ok(total / traces.len() as f64)
}

/// Per-run cache of frozen encoder work, keyed by clip uid.
#[derive(Default)]
pub struct EncoderCache {
    map: BTreeMap<u64, Rc<EncodedClip>>,
}

impl EncoderCache {
    pub fn new() -> Self {
        EncoderCache::default()
    }

    pub fn get(
        &mut self,
        model: &MoeDecoderModel,
        clip: &AudioClip,
    ) -> Result<Rc<EncodedClip>, TrainError> {
        // uid 0 marks ad-hoc clips with no identity; never cache those.
        if clip.uid == 0 {
            return Ok(Rc::new(model.encode(&featurize(clip)?)?));
        }
        if let Some(enc) = self.map.get(&clip.uid) {
            return Ok(Rc::clone(enc));
        }
        let enc = Rc::new(model.encode(&featurize(clip)?)?);
        self.map.insert(clip.uid, Rc::clone(&enc));
        Ok(enc)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Method-specific behavior layered onto the shared task loop.
pub enum MethodHooks<'a> {
    /// Plain loss (covers the mixture method, fine-tuning, replay).
    Standard,
    /// Project gradients so the memory-batch loss cannot increase.
    Agem { memory: &'a ReplayMemory },
    /// Quadratic penalty anchored at prior-task parameters.
    Ewc { penalties: &'a [FisherEstimate] },
    /// Distill old-class logits from a frozen teacher on new-task inputs.
    Lwf { teacher: &'a MoeDecoderModel, alpha: f64, temp: f64, old_token_end: usize },
}

/// Exact-match label-set accuracy of greedy decodes over `clips`.
pub fn evaluate(
    model: &MoeDecoderModel,
    clips: &[AudioClip],
    cache: &mut EncoderCache,
) -> Result<f64, TrainError> {
    if clips.is_empty() {
        return Err(TrainError::State("empty evaluation set".into()));
    }
    let mut correct = 0usize;
    for clip in clips {
        let enc = cache.get(model, clip)?;
        let pred = model.decode_greedy(&enc, DECODE_MAX_LEN)?;
        let gold: BTreeSet<(EventKind, u32)> = clip.labels.iter().map(|l| l.key()).collect();
        if pred == gold {
            correct += 1;
        }
    }
    Ok(correct as f64 / clips.len() as f64)
}

/// Expert index used as the router's gold label for a task: the expert that
/// owns the task, or the sole expert of a single-adapter model.
fn gate_gold(model: &MoeDecoderModel, task_id: usize) -> Result<usize, TrainError> {
    if let Some(i) = model.expert_index(task_id) {
        return Ok(i);
    }
    if model.num_experts() == 1 {
        return Ok(0);
    }
    Err(TrainError::State(format!("no expert owns task {task_id}")))
}

struct ClipLossVars {
    ce: Var,
    gate: Var,
}

/// Builds one clip's teacher-forced loss terms on the tape.
fn clip_losses(
    g: &mut Graph,
    model: &MoeDecoderModel,
    binding: &crate::model::TapeBinding,
    enc: &EncodedClip,
    clip: &AudioClip,
    gold_expert: usize,
) -> Result<(ClipLossVars, Var), TrainError> {
    let targets = model.target_tokens(&clip.labels);
    let mut prefix = vec![BOS_TOKEN];
    prefix.extend(&targets[..targets.len() - 1]);
    let fwd = model.forward_on(g, binding, enc, &prefix)?;
    let ce = g.cross_entropy_rows(fwd.logits, &targets)?;
    let mut summed = fwd.router_logits[0];
    for lv in &fwd.router_logits[1..] {
        summed = g.add(summed, *lv)?;
    }
    let gate = g.cross_entropy_rows(summed, &[gold_expert])?;
    Ok((ClipLossVars { ce, gate }, fwd.logits))
}

/// Trains one task: `epochs_per_task` passes over its train split with
/// replay, gate supervision, clipping, and the plateau LR schedule.
/// The task's expert (or the single shared adapter) must already exist and
/// every label must have a token.
pub fn train_task(
    model: &mut MoeDecoderModel,
    task: &Task,
    memory: Option<&ReplayMemory>,
    cfg: &TrainConfig,
    cache: &mut EncoderCache,
    hooks: &mut MethodHooks,
) -> Result<TaskRecord, TrainError> {
    cfg.validate()?;
    if task.train.is_empty() {
        return Err(TrainError::State(format!("task {} has no train split", task.task_id)));
    }
    let started = std::time::Instant::now();
    let gold = gate_gold(model, task.task_id)?;
    let names = model.trainable_names();
    let mut opt = AdamW::new(cfg.initial_lr, 0.0);
    let mut lr = cfg.initial_lr;
    let mut best_val = f64::NEG_INFINITY;
    let mut epochs = Vec::with_capacity(cfg.epochs_per_task);
    let mut order: Vec<usize> = (0..task.train.len()).collect();

    for epoch in 0..cfg.epochs_per_task {
        let mut rng = Rng::seed_from(derive_seed(
            cfg.seed,
            "epoch-shuffle",
            &[task.task_id as u64, epoch as u64],
        ));
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut gate_sum = 0.0;
        let mut steps = 0usize;

        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut g = Graph::new();
            let binding = model.bind(&mut g);
            let mut task_ces = Vec::with_capacity(chunk.len());
            let mut gate_parts = Vec::new();
            let mut distill_parts = Vec::new();
            for &i in chunk {
                let clip = &task.train[i];
                let enc = cache.get(model, clip)?;
                let (losses, logits) = clip_losses(&mut g, model, &binding, &enc, clip, gold)?;
                task_ces.push(losses.ce);
                gate_parts.push(losses.gate);
                if let MethodHooks::Lwf { teacher, temp, old_token_end, .. } = hooks {
                    let targets = model.target_tokens(&clip.labels);
                    let mut prefix = vec![BOS_TOKEN];
                    prefix.extend(&targets[..targets.len() - 1]);
                    let (t_logits, _) = teacher.forward(&enc, &prefix)?;
                    let t_old = t_logits.slice_cols(2, *old_token_end)?;
                    let s_old = g.slice_cols(logits, 2, *old_token_end)?;
                    distill_parts.push(g.distill_kl(s_old, &t_old, *temp)?);
                }
            }
            let task_ce = g.mean_scalars(&task_ces)?;

            let replay_entries = match memory {
                Some(m) if !m.is_empty() => Some(m.sample_batch(
                    chunk.len(),
                    derive_seed(
                        cfg.seed,
                        "replay",
                        &[task.task_id as u64, epoch as u64, step as u64],
                    ),
                )?),
                _ => None,
            };
            let data = if let Some(entries) = &replay_entries {
                let mut mem_ces = Vec::with_capacity(entries.len());
                for e in entries {
                    let enc = cache.get(model, &e.clip)?;
                    let mem_gold = gate_gold(model, e.source_task)?;
                    let (losses, _) =
                        clip_losses(&mut g, model, &binding, &enc, &e.clip, mem_gold)?;
                    mem_ces.push(losses.ce);
                    gate_parts.push(losses.gate);
                }
                let mem_ce = g.mean_scalars(&mem_ces)?;
                let a = g.scale(task_ce, cfg.lambda);
                let b = g.scale(mem_ce, 1.0 - cfg.lambda);
                g.add(a, b)?
            } else {
                // First task or no memory: lambda is effectively 1.
                task_ce
            };

            let gate = g.mean_scalars(&gate_parts)?;
            let scaled_gate = g.scale(gate, cfg.eta);
            let mut total = g.add(data, scaled_gate)?;
            if let MethodHooks::Lwf { alpha, temp, .. } = hooks {
                let kl = g.mean_scalars(&distill_parts)?;
                let scaled = g.scale(kl, *alpha * *temp * *temp);
                total = g.add(total, scaled)?;
            }
            g.backward(total)?;
            model.apply_tape_grads(&g, &binding);

            let mut logged_loss = g.scalar(total);
            match hooks {
                MethodHooks::Agem { memory } => {
                    if !memory.is_empty() {
                        let entries = memory.sample_batch(
                            chunk.len(),
                            derive_seed(
                                cfg.seed,
                                "agem-ref",
                                &[task.task_id as u64, epoch as u64, step as u64],
                            ),
                        )?;
                        let mut rg = Graph::new();
                        let rbind = model.bind(&mut rg);
                        let mut ces = Vec::with_capacity(entries.len());
                        for e in &entries {
                            let enc = cache.get(model, &e.clip)?;
                            let (losses, _) =
                                clip_losses(&mut rg, model, &rbind, &enc, &e.clip, gold)?;
                            ces.push(losses.ce);
                        }
                        let ref_loss = rg.mean_scalars(&ces)?;
                        rg.backward(ref_loss)?;
                        let reference = GradientBank::from_graph(&rg, &rbind, &names, model);
                        let mut grads = GradientBank::from_graph(&g, &binding, &names, model);
                        agem_project(&mut grads, &reference);
                        grads.store(model);
                    }
                }
                MethodHooks::Ewc { penalties } => {
                    logged_loss += apply_ewc_grads(model, penalties);
                }
                _ => {}
            }

            {
                let mut params = model.trainable_params_mut();
                clip_gradients(&mut params, cfg.clip_norm);
                opt.lr = lr;
                opt.step(&mut params)?;
                for p in params {
                    p.zero_grad();
                }
            }
            loss_sum += logged_loss;
            gate_sum += g.scalar(gate);
            steps += 1;
        }

        let val_acc = evaluate(model, &task.val, cache)?;
        epochs.push(EpochLog {
            epoch,
            train_loss: loss_sum / steps as f64,
            gate_loss: gate_sum / steps as f64,
            val_acc,
            lr,
        });
        if val_acc > best_val {
            best_val = val_acc;
        } else {
            lr *= cfg.lr_decay_factor;
        }
    }

    Ok(TaskRecord {
        task_id: task.task_id,
        val_curve: epochs.iter().map(|e| e.val_acc).collect(),
        final_lr: lr,
        wall_time_s: started.elapsed().as_secs_f64(),
        epochs,
    })
}

/// Appends epoch records to a line-delimited training log.
pub fn append_train_log(path: &std::path::Path, epochs: &[EpochLog]) -> Result<(), TrainError> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    for e in epochs {
        writeln!(f, "{}", serde_json::to_string(e).expect("epoch log serializes"))?;
    }
    Ok(())
}

/// Finite-difference verification of the full step loss on a small
/// two-expert model. Every trainable tensor (unfrozen expert weights,
/// routers, head) is bound as a leaf; the loss combines a current-task term,
/// a replay term, and the gate term exactly as one training step does.
/// Returns the maximum relative error over all coordinates.
pub fn full_loss_grad_check(seed: u64) -> Result<f64, TrainError> {
    let model_cfg = ModelConfig {
        d: 16,
        heads: 2,
        bottleneck: 4,
        encoder_blocks: 2,
        decoder_blocks: 2,
        ffn_hidden: 32,
        feat_bins: crate::audio::features::NUM_BINS,
        init_seed: seed,
    };
    let mut model = MoeDecoderModel::new(model_cfg)?;
    model.ensure_label_tokens(&[
        EventLabel::new(EventKind::Semantic, 0, 0),
        EventLabel::new(EventKind::Semantic, 1, 0),
        EventLabel::new(EventKind::Acoustic, 0, 1),
    ]);
    model.add_expert(0)?;
    model.add_expert(1)?;
    let task_clip = synth_clip(Some(1), None, 0.6, derive_seed(seed, "gc-task", &[]))?;
    let mem_clip = synth_clip(None, Some(0), 0.6, derive_seed(seed, "gc-mem", &[]))?;
    let enc_task = model.encode(&featurize(&task_clip)?)?;
    let enc_mem = model.encode(&featurize(&mem_clip)?)?;
    let names = model.trainable_names();
    let params = model.trainable_values();
    let cfg = TrainConfig::default();
    let err = crate::gradcheck::grad_check(
        |g, vars| {
            let named: BTreeMap<String, Var> =
                names.iter().cloned().zip(vars.iter().copied()).collect();
            let binding = model.bind_with(g, &named);
            let (task_losses, _) = clip_losses(g, &model, &binding, &enc_task, &task_clip, 1)
                .map_err(|_| NumericsError::NonFinite { op: "loss build" })?;
            let (mem_losses, _) = clip_losses(g, &model, &binding, &enc_mem, &mem_clip, 0)
                .map_err(|_| NumericsError::NonFinite { op: "loss build" })?;
            let a = g.scale(task_losses.ce, cfg.lambda);
            let b = g.scale(mem_losses.ce, 1.0 - cfg.lambda);
            let data = g.add(a, b)?;
            let gate = g.mean_scalars(&[task_losses.gate, mem_losses.gate])?;
            let scaled_gate = g.scale(gate, cfg.eta);
            g.add(data, scaled_gate)
        },
        &params,
        1e-5,
    )?;
    Ok(err)
}
