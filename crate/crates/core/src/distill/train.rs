use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::gd::GdModel;
use super::loss::{LossKind, LossSpec};
use crate::adapters::{AdapterStack, GuidedModel};
use crate::diffusion::{write_log_csv, Cond, Denoiser, EpsModel, NoiseSchedule, StepLog};
use crate::error::{Error, Result};
use crate::nn::{clip_global_norm, lr_schedule, AdamState, Bound, Matrix, Tape, Var};
use crate::rng::{self, tag, Rng};
use crate::trajectory::{sample_minibatch, TrajectoryRecord, TrajectoryStore};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMode {
    #[default]
    AgdAdapters,
    GdFullFinetune,
}

impl DistillMode {
    pub fn name(self) -> &'static str {
        match self {
            DistillMode::AgdAdapters => "agd_adapters",
            DistillMode::GdFullFinetune => "gd_full_finetune",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub steps: usize,
    pub batch: usize,
    pub peak_lr: f64,
    pub loss: LossKind,
    /// `λ(σ) = σ^(−lambda_power)` for the weighted loss.
    pub lambda_power: f64,
    pub mode: DistillMode,
    /// Global gradient-norm cap; `0` disables clipping.
    pub grad_clip: f64,
    /// Minibatch and dropout seed; set by the experiment driver.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch: 64,
            peak_lr: 1e-2,
            loss: LossKind::L2,
            lambda_power: 2.0,
            mode: DistillMode::AgdAdapters,
            grad_clip: 10.0,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch > 0 && self.peak_lr > 0.0 && self.grad_clip >= 0.0 && self.lambda_power.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid distillation config {self:?}")))
        }
    }

    pub fn loss_spec(&self) -> LossSpec {
        LossSpec {
            kind: self.loss,
            lambda_power: self.lambda_power,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillRun {
    pub mode: DistillMode,
    pub log: Vec<StepLog>,
    pub trainable_params: usize,
    pub base_params: usize,
    pub base_hash_before: u64,
    pub base_hash_after: u64,
    /// Mean held-out `‖ε_student − ε_target‖²` before and after training.
    pub held_out_initial: f64,
    pub held_out_final: f64,
}

impl DistillRun {
    pub fn param_ratio(&self) -> f64 {
        self.trainable_params as f64 / self.base_params as f64
    }

    pub fn mean_step_ms(&self) -> f64 {
        if self.log.is_empty() {
            return 0.0;
        }
        self.log.iter().map(|l| l.wall_ms).sum::<f64>() / self.log.len() as f64
    }

    /// Mean loss over the first and last tenth of the steps.
    pub fn head_tail(&self) -> Option<(f64, f64)> {
        let n = self.log.len() / 10;
        if n == 0 {
            return None;
        }
        let mean = |s: &[StepLog]| s.iter().map(|l| l.loss).sum::<f64>() / s.len() as f64;
        Some((mean(&self.log[..n]), mean(&self.log[self.log.len() - n..])))
    }

    pub fn write_csv(&self, path: &Path, config_hash: u64) -> Result<()> {
        write_log_csv(&self.log, path, config_hash)
    }

    pub fn summary(&self) -> String {
        format!(
            "mode: {}\nsteps: {}\ntrainable_params: {}\nbase_params: {}\nparam_ratio: {:.6}\n\
             held_out_initial: {:.6e}\nheld_out_final: {:.6e}\nbase_hash_unchanged: {}\n",
            self.mode.name(),
            self.log.len(),
            self.trainable_params,
            self.base_params,
            self.param_ratio(),
            self.held_out_initial,
            self.held_out_final,
            self.base_hash_before == self.base_hash_after,
        )
    }
}

struct Batch {
    x: Matrix,
    target: Matrix,
    sigma: Vec<f64>,
    cond: Vec<Cond>,
    omega: Vec<f64>,
}

impl Batch {
    fn new(records: &[&TrajectoryRecord]) -> Result<Self> {
        let d = records.first().map_or(0, |r| r.x_t.len());
        let mut x = Vec::with_capacity(records.len() * d);
        let mut target = Vec::with_capacity(records.len() * d);
        for r in records {
            x.extend_from_slice(&r.x_t);
            target.extend_from_slice(&r.eps_target);
        }
        Ok(Self {
            x: Matrix::from_vec(records.len(), d, x)?,
            target: Matrix::from_vec(records.len(), d, target)?,
            sigma: records.iter().map(|r| r.sigma).collect(),
            cond: records.iter().map(|r| r.cond).collect(),
            omega: records.iter().map(|r| r.omega).collect(),
        })
    }
}

/// Something with trainable matrices and a differentiable forward pass.
trait Student {
    /// Bound stores; those from index [`Student::first_trainable`] on receive gradients.
    fn bind(&self, tape: &mut Tape) -> Vec<Bound>;
    fn first_trainable(&self) -> usize;
    fn forward(&self, tape: &mut Tape, bound: &[Bound], b: &Batch, dropout: &mut Rng) -> Result<Var>;
    fn trainable(&mut self) -> Result<Vec<&mut Matrix>>;
    fn shapes(&self) -> Vec<Matrix>;
}

struct AgdStudent<'a> {
    base: &'a Denoiser,
    stack: &'a mut AdapterStack,
}

impl Student for AgdStudent<'_> {
    fn bind(&self, tape: &mut Tape) -> Vec<Bound> {
        vec![tape.bind(self.base.params(), false), tape.bind(self.stack.params(), true)]
    }

    fn forward(&self, tape: &mut Tape, bound: &[Bound], b: &Batch, dropout: &mut Rng) -> Result<Var> {
        let x = tape.constant(b.x.clone());
        let drop = (self.stack.spec().dropout > 0.0).then_some(dropout);
        self.stack
            .forward(self.base, tape, &bound[0], &bound[1], x, &b.sigma, &b.cond, &b.omega, drop)
    }

    fn first_trainable(&self) -> usize {
        1
    }

    fn trainable(&mut self) -> Result<Vec<&mut Matrix>> {
        Ok(self.stack.params_mut().values_mut().collect())
    }

    fn shapes(&self) -> Vec<Matrix> {
        self.stack.params().values().cloned().collect()
    }
}

impl Student for GdModel {
    fn bind(&self, tape: &mut Tape) -> Vec<Bound> {
        vec![tape.bind(self.model.params(), true), tape.bind(&self.pathway.params, true)]
    }

    fn forward(&self, tape: &mut Tape, bound: &[Bound], b: &Batch, _dropout: &mut Rng) -> Result<Var> {
        let x = tape.constant(b.x.clone());
        GdModel::forward(self, tape, &bound[0], &bound[1], x, &b.sigma, &b.cond, &b.omega)
    }

    fn first_trainable(&self) -> usize {
        0
    }

    fn trainable(&mut self) -> Result<Vec<&mut Matrix>> {
        let mut v: Vec<&mut Matrix> = self.model.params_mut()?.values_mut().collect();
        v.extend(self.pathway.params.values_mut());
        Ok(v)
    }

    fn shapes(&self) -> Vec<Matrix> {
        self.model.params().values().chain(self.pathway.params.values()).cloned().collect()
    }
}

fn check_store(store: &TrajectoryStore, base: &Denoiser, schedule: &NoiseSchedule) -> Result<()> {
    store.check_schedule(schedule)?;
    if store.header.teacher_hash != base.param_hash() {
        return Err(Error::Compatibility(format!(
            "store was generated by teacher {:016x}, base is {:016x}",
            store.header.teacher_hash,
            base.param_hash()
        )));
    }
    if store.header.data_dim as usize != base.data_dim() {
        return Err(Error::Compatibility(format!(
            "store has {}-d points, base expects {}",
            store.header.data_dim,
            base.data_dim()
        )));
    }
    Ok(())
}

fn run_loop<S: Student>(student: &mut S, train: &[&TrajectoryRecord], cfg: &DistillConfig) -> Result<Vec<StepLog>> {
    let loss_spec = cfg.loss_spec();
    let mut adam = AdamState::new(student.shapes().iter());
    let mut dropout = rng::stream(cfg.seed, &[tag::DROPOUT]);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let t0 = Instant::now();
        let draws = sample_minibatch(train, cfg.batch, rng::derive(cfg.seed, &[tag::BATCH, step as u64]))?;
        let batch = Batch::new(&draws)?;
        let mut tape = Tape::new();
        let bound = student.bind(&mut tape);
        let pred = student.forward(&mut tape, &bound, &batch, &mut dropout)?;
        let loss_v = loss_spec.build(&mut tape, pred, &batch.target, &batch.sigma)?;
        let loss = tape.value(loss_v).get(0, 0);
        if !loss.is_finite() {
            return Err(Error::Training { step, loss });
        }
        let g = tape.backward(loss_v)?;
        let mut grads: Vec<Matrix> = bound[student.first_trainable()..]
            .iter()
            .flat_map(|b| g.for_bound(&tape, b))
            .collect();
        if cfg.grad_clip > 0.0 {
            clip_global_norm(&mut grads, cfg.grad_clip);
        }
        let lr = lr_schedule(step + 1, cfg.steps, cfg.peak_lr);
        adam.step(&mut student.trainable()?, &grads, lr)?;
        log.push(StepLog {
            step,
            loss,
            lr,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
        if step % 500 == 0 {
            log::debug!("distill step {step} loss {loss:.5}");
        }
    }
    Ok(log)
}

/// Mean `‖ε_model − ε_target‖²` over `records`.
pub fn held_out_loss<M: EpsModel + ?Sized>(model: &M, records: &[&TrajectoryRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Precondition("no held-out records".into()));
    }
    let mut total = 0.0;
    for chunk in records.chunks(1024) {
        let b = Batch::new(chunk)?;
        let pred = model.predict(&b.x, &b.sigma, &b.cond, &b.omega)?;
        total += pred.sub(&b.target)?.sum_squares();
    }
    Ok(total / records.len() as f64)
}

/// Train `stack` on the training split of `store` against its cached
/// targets. The frozen `base` is only read.
pub fn distill(
    store: &TrajectoryStore,
    base: &Denoiser,
    stack: &mut AdapterStack,
    schedule: &NoiseSchedule,
    cfg: &DistillConfig,
) -> Result<DistillRun> {
    cfg.validate()?;
    if cfg.mode != DistillMode::AgdAdapters {
        return Err(Error::Config("distill runs the adapter mode; use gd_finetune for full fine-tuning".into()));
    }
    if !base.is_frozen() {
        return Err(Error::Precondition("the base model must be frozen".into()));
    }
    check_store(store, base, schedule)?;
    stack.check_base(base)?;
    let (train, held) = store.split_held_out();
    let before = base.param_hash();
    let held_out_initial = held_out_loss(&GuidedModel::new(base, stack)?, &held)?;
    let log = run_loop(&mut AgdStudent { base, stack }, &train, cfg)?;
    let held_out_final = held_out_loss(&GuidedModel::new(base, stack)?, &held)?;
    Ok(DistillRun {
        mode: DistillMode::AgdAdapters,
        log,
        trainable_params: stack.num_params(),
        base_params: base.num_params(),
        base_hash_before: before,
        base_hash_after: base.param_hash(),
        held_out_initial,
        held_out_final,
    })
}

/// Fine-tune every parameter of `model` (a copy of `base` plus its ω
/// pathway) with the same loop and loss as [`distill`].
pub fn gd_finetune(
    store: &TrajectoryStore,
    base: &Denoiser,
    model: &mut GdModel,
    schedule: &NoiseSchedule,
    cfg: &DistillConfig,
) -> Result<DistillRun> {
    cfg.validate()?;
    if cfg.mode != DistillMode::GdFullFinetune {
        return Err(Error::Config("gd_finetune requires mode gd_full_finetune".into()));
    }
    check_store(store, base, schedule)?;
    let (train, held) = store.split_held_out();
    let before = base.param_hash();
    let held_out_initial = held_out_loss(model, &held)?;
    let log = run_loop(model, &train, cfg)?;
    let held_out_final = held_out_loss(model, &held)?;
    Ok(DistillRun {
        mode: DistillMode::GdFullFinetune,
        log,
        trainable_params: model.num_params(),
        base_params: base.num_params(),
        base_hash_before: before,
        base_hash_after: base.param_hash(),
        held_out_initial,
        held_out_final,
    })
}
