//! Reference continual-learning methods sharing the mixture model skeleton
//! with a single always-active adapter: the math for A-GEM projection, EWC
//! penalties, and LwF distillation, plus the Fisher estimator they need.
//! The per-task curriculum loops live in the experiment harness; everything
//! here is the method-specific arithmetic.

use crate::audio::AudioClip;
use crate::graph::Graph;
use crate::model::{MoeDecoderModel, TapeBinding, BOS_TOKEN};
use crate::rng::{derive_seed, Rng};
use crate::tensor::{softmax, Tensor};
use crate::trainer::{EncoderCache, TrainError};
use std::collections::BTreeMap;

/// Default EWC regularization strength.
pub const LAMBDA_EWC: f64 = 100.0;
/// Default LwF distillation weight.
pub const LWF_ALPHA: f64 = 1.0;
/// Default LwF softmax temperature.
pub const LWF_TEMP: f64 = 2.0;

/// Diagonal empirical Fisher with the parameter snapshot it was taken at
/// and the penalty strength to apply against that anchor.
#[derive(Clone, Debug)]
pub struct FisherEstimate {
    pub fisher: BTreeMap<String, Tensor>,
    pub anchor: BTreeMap<String, Tensor>,
    pub strength: f64,
}

/// Per-parameter gradients pulled off a tape, keyed by parameter name.
#[derive(Clone, Debug)]
pub struct GradientBank {
    pub grads: BTreeMap<String, Tensor>,
}

impl GradientBank {
    /// Collects gradients for `names` after a backward pass; parameters the
    /// tape never touched get zeros.
    pub fn from_graph(
        g: &Graph,
        binding: &TapeBinding,
        names: &[String],
        model: &MoeDecoderModel,
    ) -> Self {
        let mut grads = BTreeMap::new();
        for name in names {
            let var = binding.var_named(name);
            let grad = g.grad(var).cloned().unwrap_or_else(|| {
                let p = model.param(name).expect("name resolves");
                Tensor::zeros(p.value.rows(), p.value.cols())
            });
            grads.insert(name.clone(), grad);
        }
        GradientBank { grads }
    }

    /// Writes these gradients into the model's parameters.
    pub fn store(mut self, model: &mut MoeDecoderModel) {
        let keys: Vec<String> = self.grads.keys().cloned().collect();
        for name in keys {
            let p = model.param_mut(&name).expect("name resolves");
            p.grad = self.grads.remove(&name).expect("key enumerated above");
        }
    }
}

/// A-GEM projection: when g conflicts with the replay gradient (negative
/// dot product), remove the conflicting component so the replay loss cannot
/// increase to first order: g' = g - (g.g_ref / ||g_ref||^2) g_ref.
/// A zero reference leaves g untouched. Returns the dot product.
pub fn agem_project(grads: &mut GradientBank, reference: &GradientBank) -> f64 {
    let mut dot = 0.0;
    let mut ref_sq = 0.0;
    for (name, g) in grads.grads.iter() {
        if let Some(r) = reference.grads.get(name) {
            for (gv, rv) in g.data().iter().zip(r.data()) {
                dot += gv * rv;
                ref_sq += rv * rv;
            }
        }
    }
    if dot < 0.0 && ref_sq > 0.0 {
        let coef = dot / ref_sq;
        for (name, g) in grads.grads.iter_mut() {
            if let Some(r) = reference.grads.get(name) {
                for (gv, rv) in g.data_mut().iter_mut().zip(r.data()) {
                    *gv -= coef * rv;
                }
            }
        }
    }
    dot
}

/// (strength/2) * sum F (theta - theta*)^2 over the overlapping region of
/// every parameter present in the estimate. Shapes may have grown since the
/// anchor was taken (new vocabulary columns); grown entries have no anchor
/// and are skipped.
pub fn ewc_penalty(model: &MoeDecoderModel, est: &FisherEstimate) -> f64 {
    let mut value = 0.0;
    for (name, fisher) in &est.fisher {
        let anchor = match est.anchor.get(name) {
            Some(a) => a,
            None => continue,
        };
        let p = match model.param(name) {
            Some(p) => p,
            None => continue,
        };
        let rows = fisher.rows().min(p.value.rows());
        let cols = fisher.cols().min(p.value.cols());
        for r in 0..rows {
            for c in 0..cols {
                let diff = p.value.get(r, c) - anchor.get(r, c);
                value += 0.5 * est.strength * fisher.get(r, c) * diff * diff;
            }
        }
    }
    value
}

/// Adds the EWC penalty gradient (strength * F * (theta - theta*)) in place
/// and returns the penalty value, summed over all estimates.
pub fn apply_ewc_grads(model: &mut MoeDecoderModel, penalties: &[FisherEstimate]) -> f64 {
    let mut value = 0.0;
    for est in penalties {
        value += ewc_penalty(model, est);
        for (name, fisher) in &est.fisher {
            let anchor = match est.anchor.get(name) {
                Some(a) => a,
                None => continue,
            };
            let p = match model.param_mut(name) {
                Some(p) => p,
                None => continue,
            };
            let rows = fisher.rows().min(p.value.rows());
            let cols = fisher.cols().min(p.value.cols());
            for r in 0..rows {
                for c in 0..cols {
                    let diff = p.value.get(r, c) - anchor.get(r, c);
                    let g = p.grad.get(r, c) + est.strength * fisher.get(r, c) * diff;
                    p.grad.set(r, c, g);
                }
            }
        }
    }
    value
}

/// Diagonal empirical Fisher over up to `max_samples` clips of a finished
/// task, anchored at the current parameters.
pub fn estimate_fisher(
    model: &MoeDecoderModel,
    clips: &[AudioClip],
    cache: &mut EncoderCache,
    max_samples: usize,
    seed: u64,
    strength: f64,
) -> Result<FisherEstimate, TrainError> {
    if clips.is_empty() {
        return Err(TrainError::State("empty fisher sample".into()));
    }
    let names = model.trainable_names();
    let mut fisher: BTreeMap<String, Tensor> = names
        .iter()
        .map(|n| {
            let p = model.param(n).expect("name resolves");
            (n.clone(), Tensor::zeros(p.value.rows(), p.value.cols()))
        })
        .collect();
    let mut rng = Rng::seed_from(derive_seed(seed, "fisher", &[]));
    let count = max_samples.min(clips.len());
    let picks = rng.sample_indices(clips.len(), count);
    for i in picks {
        let clip = &clips[i];
        let enc = cache.get(model, clip)?;
        let mut g = Graph::new();
        let binding = model.bind(&mut g);
        let targets = model.target_tokens(&clip.labels);
        let mut prefix = vec![BOS_TOKEN];
        prefix.extend(&targets[..targets.len() - 1]);
        let fwd = model.forward_on(&mut g, &binding, &enc, &prefix)?;
        let ce = g.cross_entropy_rows(fwd.logits, &targets)?;
        g.backward(ce)?;
        for name in &names {
            if let Some(grad) = g.grad(binding.var_named(name)) {
                let acc = fisher.get_mut(name).expect("initialized above");
                for (av, gv) in acc.data_mut().iter_mut().zip(grad.data()) {
                    *av += gv * gv;
                }
            }
        }
    }
    for t in fisher.values_mut() {
        *t = t.scale(1.0 / count as f64);
    }
    let anchor = names
        .iter()
        .map(|n| (n.clone(), model.param(n).expect("name resolves").value.clone()))
        .collect();
    Ok(FisherEstimate { fisher, anchor, strength })
}

/// task_loss + alpha * T^2 * KL(softmax(teacher/T) || softmax(student/T)),
/// KL averaged over rows. Callers slice both logit sets to the old-class
/// columns first.
pub fn lwf_loss(
    student_logits: &Tensor,
    teacher_logits: &Tensor,
    task_loss: f64,
    alpha: f64,
    temperature: f64,
) -> Result<f64, TrainError> {
    if student_logits.rows() != teacher_logits.rows()
        || student_logits.cols() != teacher_logits.cols()
    {
        return Err(TrainError::State("student and teacher logit shapes differ".into()));
    }
    if temperature <= 0.0 {
        return Err(TrainError::State("temperature must be positive".into()));
    }
    let rows = student_logits.rows();
    let cols = student_logits.cols();
    let mut kl_sum = 0.0;
    for r in 0..rows {
        let t_row: Vec<f64> = (0..cols).map(|c| teacher_logits.get(r, c) / temperature).collect();
        let s_row: Vec<f64> = (0..cols).map(|c| student_logits.get(r, c) / temperature).collect();
        let t_p = softmax(&t_row);
        let s_p = softmax(&s_row);
        for (tp, sp) in t_p.iter().zip(&s_p) {
            if *tp > 0.0 {
                kl_sum += tp * (tp.ln() - sp.ln());
            }
        }
    }
    Ok(task_loss + alpha * temperature * temperature * kl_sum / rows as f64)
}
