//! Bi-level optimization: inner adaptation, the exact second-order
//! meta-gradient, Adam, and the meta-training loop.
//!
//! For `k` inner steps `φ_{j+1} = φ_j − α∇L_S(φ_j)` the meta-gradient is
//! `(I − αH_S(φ_0))···(I − αH_S(φ_{k−1}))·∇L_Q(φ_k)`, evaluated right to left
//! with one Hessian-vector product per step.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::gradient_alignment_with;
use crate::diffcore::{
    check_layout, engine, DatasetLoss, GradientVector, LossReport, Objective, ParameterVector,
};
use crate::models::{argmax_first, init_params, ModelSpec};
use crate::tasks::{sample_ocda_task, sample_standard_task, DomainDataset, LabeledExample, Task};
use crate::{seeded_rng, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightDecayMode {
    /// `λθ` added to the gradient before the moment updates.
    Coupled,
    /// `β·λ·θ` subtracted from the parameters after the Adam update.
    Decoupled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub inner_steps: usize,
    pub shots: usize,
    pub meta_batch_size: usize,
    pub max_iterations: usize,
    pub weight_decay: f64,
    pub weight_decay_mode: WeightDecayMode,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub early_stop_patience: usize,
    pub eval_interval: usize,
    /// Fixed validation tasks sampled per validation domain.
    pub validation_tasks: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self::rainbow()
    }
}

impl HyperParams {
    pub fn rainbow() -> Self {
        Self {
            inner_lr: 0.01,
            outer_lr: 0.001,
            inner_steps: 1,
            shots: 1,
            meta_batch_size: 4,
            max_iterations: 30_000,
            weight_decay: 1e-5,
            weight_decay_mode: WeightDecayMode::Coupled,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            early_stop_patience: 10,
            eval_interval: 250,
            validation_tasks: 4,
        }
    }

    pub fn pump() -> Self {
        Self {
            shots: 2,
            meta_batch_size: 2,
            max_iterations: 20_000,
            ..Self::rainbow()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("hyperparameters: {m}")));
        if !(self.inner_lr > 0.0 && self.inner_lr.is_finite())
            || !(self.outer_lr > 0.0 && self.outer_lr.is_finite())
        {
            return bad("learning rates must be positive and finite");
        }
        if self.inner_steps == 0 || self.shots == 0 || self.meta_batch_size == 0 {
            return bad("inner_steps, shots and meta_batch_size must be positive");
        }
        if self.eval_interval == 0 || self.early_stop_patience == 0 || self.validation_tasks == 0 {
            return bad("eval_interval, early_stop_patience and validation_tasks must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be nonnegative");
        }
        if !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || !(self.adam_eps > 0.0)
        {
            return bad("Adam constants need 0 <= beta < 1 and eps > 0");
        }
        Ok(())
    }
}

/// Task sampling strategy during meta-training and meta-validation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// `K` support and `K` query examples per class.
    Standard,
    /// `K` support examples of the normal class, `K` query examples per class.
    Ocda,
}

/// Optimizer state owned by the training driver.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParameterVector,
    pub first_moment: GradientVector,
    pub second_moment: GradientVector,
    pub iteration: usize,
    pub best_validation_loss: f64,
    pub iterations_since_best: usize,
}

impl TrainState {
    pub fn new(params: ParameterVector) -> Self {
        let layout = params.layout().clone();
        Self {
            params,
            first_moment: GradientVector::zeros(layout.clone()),
            second_moment: GradientVector::zeros(layout),
            iteration: 0,
            best_validation_loss: f64::INFINITY,
            iterations_since_best: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub iteration: usize,
    /// Mean post-adaptation query loss over the meta-batches since the
    /// previous record.
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// Mean `∇L_S·∇L_Q` on the validation tasks at the meta-parameters.
    pub val_alignment: f64,
    pub val_cosine: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<HistoryRecord>,
    pub best_iteration: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    /// `iteration,train_loss,val_loss,val_acc`, full precision.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,train_loss,val_loss,val_acc\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.iteration, r.train_loss, r.val_loss, r.val_acc
            ));
        }
        out
    }

    /// `iteration,inner_product,cosine` on the validation tasks.
    pub fn alignment_csv(&self) -> String {
        let mut out = String::from("iteration,inner_product,cosine\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{}\n",
                r.iteration, r.val_alignment, r.val_cosine
            ));
        }
        out
    }
}

/// Everything a training run produces.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best validation loss (final parameters when
    /// there is nothing to validate on).
    pub params: ParameterVector,
    pub history: TrainHistory,
    pub state: TrainState,
}

fn check_steps(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("inner_steps must be at least 1".into()));
    }
    Ok(())
}

/// `k` full-batch gradient-descent steps of size `alpha` on `objective`.
pub fn inner_adapt_with(
    objective: &dyn Objective,
    params: &ParameterVector,
    alpha: f64,
    k: usize,
) -> Result<ParameterVector> {
    check_steps(k)?;
    let mut phi = params.clone();
    for _ in 0..k {
        let g = objective.gradient(&phi)?;
        phi = phi.offset_by(&g, -alpha)?;
    }
    Ok(phi)
}

/// Post-adaptation query loss and the exact gradient of
/// `θ ↦ L_Q(inner_adapt(θ))`.
pub fn meta_gradient_with(
    support: &dyn Objective,
    query: &dyn Objective,
    params: &ParameterVector,
    alpha: f64,
    k: usize,
) -> Result<(LossReport, GradientVector)> {
    check_steps(k)?;
    let mut trajectory = Vec::with_capacity(k);
    let mut phi = params.clone();
    if alpha != 0.0 {
        for _ in 0..k {
            let g = support.gradient(&phi)?;
            let next = phi.offset_by(&g, -alpha)?;
            trajectory.push(std::mem::replace(&mut phi, next));
        }
    }
    let (report, mut v) = query.loss_and_gradient(&phi)?;
    for phi_j in trajectory.iter().rev() {
        let hv = support.hessian_vector_product(phi_j, &v)?;
        v.add_scaled(&hv, -alpha)?;
    }
    Ok((report, v))
}

/// `∇L_Q(φ)` with `φ` treated as a constant of `θ`.
pub fn meta_gradient_first_order_with(
    support: &dyn Objective,
    query: &dyn Objective,
    params: &ParameterVector,
    alpha: f64,
    k: usize,
) -> Result<GradientVector> {
    let phi = inner_adapt_with(support, params, alpha, k)?;
    query.gradient(&phi)
}

/// `θ ↦ L_Q(inner_adapt(θ))` as an objective, for finite-difference checks
/// of the meta-gradient. Second derivatives are not provided.
pub struct AdaptedQueryLoss<'a> {
    pub support: &'a dyn Objective,
    pub query: &'a dyn Objective,
    pub alpha: f64,
    pub inner_steps: usize,
}

impl Objective for AdaptedQueryLoss<'_> {
    fn loss(&self, params: &ParameterVector) -> Result<LossReport> {
        let phi = inner_adapt_with(self.support, params, self.alpha, self.inner_steps)?;
        self.query.loss(&phi)
    }

    fn loss_and_gradient(&self, params: &ParameterVector) -> Result<(LossReport, GradientVector)> {
        meta_gradient_with(
            self.support,
            self.query,
            params,
            self.alpha,
            self.inner_steps,
        )
    }

    fn hessian_vector_product(
        &self,
        _: &ParameterVector,
        _: &GradientVector,
    ) -> Result<GradientVector> {
        Err(Error::Config(
            "second derivatives of the adapted query loss are not available".into(),
        ))
    }
}

fn nonempty(data: &[LabeledExample]) -> Result<()> {
    if data.is_empty() {
        Err(Error::EmptyDataset)
    } else {
        Ok(())
    }
}

pub fn inner_adapt(
    spec: &ModelSpec,
    params: &ParameterVector,
    support: &[LabeledExample],
    alpha: f64,
    k: usize,
) -> Result<ParameterVector> {
    nonempty(support)?;
    inner_adapt_with(&DatasetLoss::new(spec, support), params, alpha, k)
}

pub fn meta_gradient(
    spec: &ModelSpec,
    params: &ParameterVector,
    task: &Task,
    alpha: f64,
    k: usize,
) -> Result<GradientVector> {
    Ok(task_meta_gradient(spec, params, task, alpha, k)?.1)
}

/// Meta-gradient together with the post-adaptation query loss.
pub fn task_meta_gradient(
    spec: &ModelSpec,
    params: &ParameterVector,
    task: &Task,
    alpha: f64,
    k: usize,
) -> Result<(LossReport, GradientVector)> {
    nonempty(&task.support)?;
    nonempty(&task.query)?;
    meta_gradient_with(
        &DatasetLoss::new(spec, &task.support),
        &DatasetLoss::new(spec, &task.query),
        params,
        alpha,
        k,
    )
}

pub fn meta_gradient_first_order(
    spec: &ModelSpec,
    params: &ParameterVector,
    task: &Task,
    alpha: f64,
    k: usize,
) -> Result<GradientVector> {
    nonempty(&task.support)?;
    nonempty(&task.query)?;
    meta_gradient_first_order_with(
        &DatasetLoss::new(spec, &task.support),
        &DatasetLoss::new(spec, &task.query),
        params,
        alpha,
        k,
    )
}

/// One bias-corrected Adam step with weight decay.
pub fn adam_step(
    mut state: TrainState,
    grad: &GradientVector,
    hp: &HyperParams,
) -> Result<TrainState> {
    check_layout(&state.params, grad)?;
    check_layout(&state.params, &state.first_moment)?;
    check_layout(&state.params, &state.second_moment)?;
    if !grad.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite gradient at iteration {}",
            state.iteration
        )));
    }
    let t = state.iteration as i32 + 1;
    let (b1, b2) = (hp.adam_beta1, hp.adam_beta2);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    let lambda = hp.weight_decay;
    let coupled = hp.weight_decay_mode == WeightDecayMode::Coupled;
    let theta = state.params.values_mut();
    let mv = state.first_moment.values_mut();
    let vv = state.second_moment.values_mut();
    for i in 0..theta.len() {
        let p = theta[i];
        let g = if coupled {
            grad.values()[i] + lambda * p
        } else {
            grad.values()[i]
        };
        mv[i] = b1 * mv[i] + (1.0 - b1) * g;
        vv[i] = b2 * vv[i] + (1.0 - b2) * g * g;
        let step = (mv[i] / c1) / ((vv[i] / c2).sqrt() + hp.adam_eps);
        theta[i] = if coupled {
            p - hp.outer_lr * step
        } else {
            p - hp.outer_lr * (step + lambda * p)
        };
    }
    if !state.params.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite parameters after iteration {t}"
        )));
    }
    state.iteration += 1;
    Ok(state)
}

fn require_normal(strategy: Strategy, normal_class: Option<usize>) -> Result<usize> {
    match (strategy, normal_class) {
        (Strategy::Ocda, None) => Err(Error::Config(
            "the OC-DA strategy requires a normal class".into(),
        )),
        (_, n) => Ok(n.unwrap_or(0)),
    }
}

/// One task from `domain` under `strategy`.
pub fn sample_task<R: Rng + ?Sized>(
    domain: &DomainDataset,
    strategy: Strategy,
    normal_class: Option<usize>,
    shots: usize,
    rng: &mut R,
) -> Result<Task> {
    match strategy {
        Strategy::Standard => sample_standard_task(domain, shots, rng),
        Strategy::Ocda => {
            sample_ocda_task(domain, require_normal(strategy, normal_class)?, shots, rng)
        }
    }
}

/// `|I|` domains drawn uniformly without replacement, one task each, in
/// ascending domain-id order.
pub fn sample_meta_batch<R: Rng + ?Sized>(
    domains: &[DomainDataset],
    hp: &HyperParams,
    strategy: Strategy,
    normal_class: Option<usize>,
    rng: &mut R,
) -> Result<Vec<Task>> {
    if hp.meta_batch_size > domains.len() {
        return Err(Error::Config(format!(
            "meta-batch of {} domains from {} training domains",
            hp.meta_batch_size,
            domains.len()
        )));
    }
    let mut chosen = rand::seq::index::sample(rng, domains.len(), hp.meta_batch_size).into_vec();
    chosen.sort_by(|&a, &b| {
        domains[a]
            .domain_id()
            .cmp(domains[b].domain_id())
            .then(a.cmp(&b))
    });
    chosen
        .into_iter()
        .map(|i| sample_task(&domains[i], strategy, normal_class, hp.shots, rng))
        .collect()
}

/// Averages per-task meta-gradients (computed in parallel, summed in task
/// order) and applies one Adam step. Returns the mean query loss.
pub fn meta_train_step(
    spec: &ModelSpec,
    hp: &HyperParams,
    state: TrainState,
    tasks: &[Task],
) -> Result<(TrainState, f64)> {
    if tasks.is_empty() {
        return Err(Error::Config("empty meta-batch".into()));
    }
    let parts: Vec<(LossReport, GradientVector)> = tasks
        .par_iter()
        .map(|t| task_meta_gradient(spec, &state.params, t, hp.inner_lr, hp.inner_steps))
        .collect::<Result<_>>()?;
    let mut grad = GradientVector::zeros(state.params.layout().clone());
    let mut loss = 0.0;
    for (report, g) in &parts {
        grad.add_scaled(g, 1.0)?;
        loss += report.loss;
    }
    let n = tasks.len() as f64;
    let grad = grad.scaled(1.0 / n);
    Ok((adam_step(state, &grad, hp)?, loss / n))
}

/// Post-adaptation evaluation of one task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEvaluation {
    pub loss: f64,
    pub accuracy: f64,
}

/// Adapts on the support set, then measures loss and accuracy on the query.
pub fn evaluate_task(
    spec: &ModelSpec,
    params: &ParameterVector,
    task: &Task,
    alpha: f64,
    k: usize,
) -> Result<TaskEvaluation> {
    nonempty(&task.query)?;
    let phi = if task.support.is_empty() || alpha == 0.0 {
        params.clone()
    } else {
        inner_adapt(spec, params, &task.support, alpha, k)?
    };
    let (loss, logits) = engine::loss_and_logits(spec, phi.values(), &task.query)?;
    let correct = logits
        .chunks(spec.class_count)
        .zip(&task.query)
        .filter(|(row, e)| argmax_first(row) == e.label)
        .count();
    Ok(TaskEvaluation {
        loss,
        accuracy: correct as f64 / task.query.len() as f64,
    })
}

struct Validation {
    loss: f64,
    accuracy: f64,
    inner_product: f64,
    cosine: f64,
}

fn validate_tasks(
    spec: &ModelSpec,
    params: &ParameterVector,
    tasks: &[Task],
    hp: &HyperParams,
) -> Result<Validation> {
    let parts: Vec<(TaskEvaluation, f64, f64)> = tasks
        .par_iter()
        .map(|t| {
            let e = evaluate_task(spec, params, t, hp.inner_lr, hp.inner_steps)?;
            let a = gradient_alignment_with(
                &DatasetLoss::new(spec, &t.support),
                &DatasetLoss::new(spec, &t.query),
                params,
            )?;
            Ok((e, a.inner_product, a.cosine))
        })
        .collect::<Result<_>>()?;
    let n = parts.len() as f64;
    let mut v = Validation {
        loss: 0.0,
        accuracy: 0.0,
        inner_product: 0.0,
        cosine: 0.0,
    };
    for (e, ip, cos) in &parts {
        v.loss += e.loss;
        v.accuracy += e.accuracy;
        v.inner_product += ip;
        v.cosine += cos;
    }
    v.loss /= n;
    v.accuracy /= n;
    v.inner_product /= n;
    v.cosine /= n;
    Ok(v)
}

const VALIDATION_STREAM: u64 = 0x5eed_0000_0000_0001;

/// The fixed validation tasks used by [`train`] for a given seed.
pub fn validation_tasks(
    val_domains: &[DomainDataset],
    hp: &HyperParams,
    strategy: Strategy,
    normal_class: Option<usize>,
    seed: u64,
) -> Result<Vec<Task>> {
    let mut rng = seeded_rng(seed ^ VALIDATION_STREAM);
    let mut tasks = Vec::with_capacity(val_domains.len() * hp.validation_tasks);
    for d in val_domains {
        for _ in 0..hp.validation_tasks {
            tasks.push(sample_task(d, strategy, normal_class, hp.shots, &mut rng)?);
        }
    }
    Ok(tasks)
}

/// Meta-training from `init_params(spec, seed)`; returns the best
/// validation checkpoint and the history.
pub fn train(
    spec: &ModelSpec,
    hp: &HyperParams,
    train_domains: &[DomainDataset],
    val_domains: &[DomainDataset],
    strategy: Strategy,
    normal_class: Option<usize>,
    seed: u64,
) -> Result<(ParameterVector, TrainHistory)> {
    let out = train_from(
        spec,
        hp,
        init_params(spec, seed),
        train_domains,
        val_domains,
        strategy,
        normal_class,
        seed,
    )?;
    Ok((out.params, out.history))
}

#[allow(clippy::too_many_arguments)]
pub fn train_from(
    spec: &ModelSpec,
    hp: &HyperParams,
    init: ParameterVector,
    train_domains: &[DomainDataset],
    val_domains: &[DomainDataset],
    strategy: Strategy,
    normal_class: Option<usize>,
    seed: u64,
) -> Result<TrainOutcome> {
    hp.validate()?;
    let normal = require_normal(strategy, normal_class)?;
    for d in train_domains.iter().chain(val_domains) {
        if d.class_count() != spec.class_count {
            return Err(Error::Config(format!(
                "{} has {} classes, the model has {}",
                d.domain_id(),
                d.class_count(),
                spec.class_count
            )));
        }
        if strategy == Strategy::Ocda && normal >= d.class_count() {
            return Err(Error::Label(format!(
                "normal class {normal} outside {}",
                d.domain_id()
            )));
        }
    }
    let mut state = TrainState::new(init);
    let mut best = state.params.clone();
    let mut history = TrainHistory::default();
    if hp.max_iterations == 0 {
        return Ok(TrainOutcome {
            params: best,
            history,
            state,
        });
    }
    if train_domains.is_empty() {
        return Err(Error::Config("no training domains".into()));
    }
    let val_tasks = validation_tasks(val_domains, hp, strategy, normal_class, seed)?;
    let mut rng = seeded_rng(seed);
    let mut window_loss = 0.0;
    let mut window_len = 0usize;
    while state.iteration < hp.max_iterations {
        let tasks = sample_meta_batch(train_domains, hp, strategy, normal_class, &mut rng)?;
        let (next, loss) = meta_train_step(spec, hp, state, &tasks)?;
        state = next;
        window_loss += loss;
        window_len += 1;
        let at_end = state.iteration == hp.max_iterations;
        if state.iteration % hp.eval_interval != 0 && !at_end {
            continue;
        }
        let train_loss = window_loss / window_len as f64;
        window_loss = 0.0;
        window_len = 0;
        if val_tasks.is_empty() {
            best = state.params.clone();
            history.best_iteration = state.iteration;
            history.records.push(HistoryRecord {
                iteration: state.iteration,
                train_loss,
                val_loss: f64::NAN,
                val_acc: f64::NAN,
                val_alignment: f64::NAN,
                val_cosine: f64::NAN,
            });
            continue;
        }
        let v = validate_tasks(spec, &state.params, &val_tasks, hp)?;
        if !v.loss.is_finite() {
            return Err(Error::Numeric(format!(
                "validation loss {} at iteration {}",
                v.loss, state.iteration
            )));
        }
        history.records.push(HistoryRecord {
            iteration: state.iteration,
            train_loss,
            val_loss: v.loss,
            val_acc: v.accuracy,
            val_alignment: v.inner_product,
            val_cosine: v.cosine,
        });
        if v.loss < state.best_validation_loss {
            state.best_validation_loss = v.loss;
            state.iterations_since_best = 0;
            best = state.params.clone();
            history.best_iteration = state.iteration;
        } else {
            state.iterations_since_best = state.iteration - history.best_iteration;
            if state.iterations_since_best >= hp.early_stop_patience * hp.eval_interval {
                history.stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        params: best,
        history,
        state,
    })
}

#[cfg(test)]
mod tests;
