use std::path::Path;
use std::time::Instant;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::dataset::{Cond, ToyDataset};
use super::denoiser::{Denoiser, DenoiserSpec, NoHook};
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::nn::{clip_global_norm, lr_schedule, AdamState, Matrix, Tape};
use crate::rng::{self, tag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub peak_lr: f64,
    pub cond_dropout: f64,
    /// Global gradient-norm cap; `0` disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch: 128,
            peak_lr: 2e-3,
            cond_dropout: 0.1,
            grad_clip: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch > 0
            && self.peak_lr > 0.0
            && (0.0..=1.0).contains(&self.cond_dropout)
            && self.grad_clip >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training config {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

/// Train the base network on `E‖ε_θ(x + σε, σ, c) − ε‖²` with `σ` drawn
/// log-uniformly over the schedule range and labels replaced by `∅` with
/// probability `cond_dropout`.
pub fn train_base(
    dataset: &ToyDataset,
    spec: &DenoiserSpec,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Denoiser, Vec<StepLog>)> {
    cfg.validate()?;
    schedule.validate()?;
    if spec.data_dim != dataset.dim() || spec.num_classes != dataset.num_classes() {
        return Err(Error::Config(format!(
            "denoiser expects {}-d data with {} classes; dataset has {}-d and {}",
            spec.data_dim,
            spec.num_classes,
            dataset.dim(),
            dataset.num_classes()
        )));
    }
    let mut model = Denoiser::new(spec.clone(), seed)?;
    let mut adam = AdamState::new(model.params().values());
    let mut r = rng::stream(seed, &[tag::BATCH]);
    let (ln_lo, ln_hi) = (schedule.sigma_min.ln(), schedule.sigma_max.ln());
    let d = dataset.dim();
    let k = dataset.num_classes();
    let mut logs = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let start = Instant::now();
        let b = cfg.batch;
        let mut xt = Matrix::zeros(b, d);
        let mut eps = Matrix::zeros(b, d);
        let mut sigma = Vec::with_capacity(b);
        let mut cond = Vec::with_capacity(b);
        for i in 0..b {
            let c = r.random_range(0..k);
            let x = dataset.sample(c, &mut r);
            let s = (ln_lo + (ln_hi - ln_lo) * r.random::<f64>()).exp();
            let drop = r.random::<f64>() < cfg.cond_dropout;
            for j in 0..d {
                let e: f64 = r.sample(StandardNormal);
                eps.set(i, j, e);
                xt.set(i, j, x[j] + s * e);
            }
            sigma.push(s);
            cond.push(if drop { Cond::Null } else { Cond::Class(c) });
        }

        let mut tape = Tape::new();
        let p = tape.bind(model.params(), true);
        let xv = tape.constant(xt);
        let pred = model.forward(&mut tape, &p, xv, &sigma, &cond, &mut NoHook)?;
        let loss_v = tape.squared_error(pred, &eps, &vec![1.0; b])?;
        let loss = tape.value(loss_v).get(0, 0);
        if !loss.is_finite() {
            return Err(Error::Training { step, loss });
        }
        let mut grads = tape.backward(loss_v)?.for_bound(&tape, &p);
        if cfg.grad_clip > 0.0 {
            clip_global_norm(&mut grads, cfg.grad_clip);
        }
        let lr = lr_schedule(step + 1, cfg.steps, cfg.peak_lr);
        let mut ps: Vec<&mut Matrix> = model.params_mut()?.values_mut().collect();
        adam.step(&mut ps, &grads, lr)?;
        logs.push(StepLog {
            step,
            loss,
            lr,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        if step % 500 == 0 {
            log::debug!("train_base step {step} loss {loss:.4}");
        }
    }
    model.freeze();
    Ok((model, logs))
}

/// `config_hash,step,loss,lr,wall_ms` rows, one per step.
pub fn write_log_csv(log: &[StepLog], path: &Path, config_hash: u64) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(f));
    let csv_err = |e: csv::Error| Error::io(path, e.into());
    w.write_record(["config_hash", "step", "loss", "lr", "wall_ms"]).map_err(csv_err)?;
    for l in log {
        w.write_record([
            format!("{config_hash:016x}"),
            l.step.to_string(),
            format!("{:e}", l.loss),
            format!("{:e}", l.lr),
            format!("{:.3}", l.wall_ms),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(classes: usize) -> DenoiserSpec {
        DenoiserSpec {
            num_classes: classes,
            width: 32,
            depth: 2,
            embed_dim: 8,
            fourier_frequencies: 8,
            ..DenoiserSpec::default()
        }
    }

    #[test]
    fn zero_steps_returns_frozen_init() {
        let ds = ToyDataset::single_gaussian(&[0.0, 0.0], 1.0).unwrap();
        let cfg = TrainConfig { steps: 0, ..TrainConfig::default() };
        let (m, logs) = train_base(&ds, &small_spec(1), &NoiseSchedule::default(), &cfg, 1).unwrap();
        assert!(logs.is_empty());
        assert!(m.is_frozen());
        assert_eq!(m.param_hash(), Denoiser::new(small_spec(1), 1).unwrap().param_hash());
    }

    #[test]
    fn seeded_training_is_bit_reproducible() {
        let ds = ToyDataset::single_gaussian(&[0.5, 0.0], 0.5).unwrap();
        let cfg = TrainConfig { steps: 20, batch: 16, ..TrainConfig::default() };
        let a = train_base(&ds, &small_spec(1), &NoiseSchedule::default(), &cfg, 3).unwrap();
        let b = train_base(&ds, &small_spec(1), &NoiseSchedule::default(), &cfg, 3).unwrap();
        assert_eq!(a.0.param_hash(), b.0.param_hash());
        assert_eq!(
            a.1.iter().map(|l| l.loss).collect::<Vec<_>>(),
            b.1.iter().map(|l| l.loss).collect::<Vec<_>>()
        );
    }

    #[test]
    fn mismatched_spec_is_config_error() {
        let ds = ToyDataset::single_gaussian(&[0.0, 0.0], 1.0).unwrap();
        let r = train_base(&ds, &small_spec(3), &NoiseSchedule::default(), &TrainConfig::default(), 0);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn huge_learning_rate_reports_training_error() {
        let ds = ToyDataset::single_gaussian(&[0.0, 0.0], 1.0).unwrap();
        let cfg = TrainConfig {
            steps: 200,
            batch: 8,
            peak_lr: 1e200,
            grad_clip: 0.0,
            ..TrainConfig::default()
        };
        let r = train_base(&ds, &small_spec(1), &NoiseSchedule::default(), &cfg, 0);
        assert!(matches!(r, Err(Error::Training { .. }) | Err(Error::Numeric(_))), "{r:?}");
    }
}
