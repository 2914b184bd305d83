//! End-to-end stages driven by one [`ExperimentConfig`].

use crate::adapters::{AdapterStack, GuidedModel, Init};
use crate::config::ExperimentConfig;
use crate::diffusion::{self, CfgTeacher, Denoiser, SamplerKind, StepLog, ToyDataset};
use crate::distill::{self, DistillMode, DistillRun, GdModel, OmegaPathway};
use crate::error::{Error, Result};
use crate::eval::{self, sig6, Candidate, EvalReport, Method, TransferReport};
use crate::rng;
use crate::trajectory::{self, TrajectorySource, TrajectoryStore};

/// Stage labels for seed derivation.
pub mod stage {
    pub const TRAIN: u64 = 1;
    pub const TRAJECTORIES: u64 = 2;
    pub const ADAPTER_INIT: u64 = 3;
    pub const DISTILL: u64 = 4;
    pub const GD_INIT: u64 = 5;
    pub const ENDPOINT: u64 = 6;
}

pub fn stage_seed(cfg: &ExperimentConfig, stage: u64) -> u64 {
    rng::derive(cfg.seed, &[0x5eed, stage])
}

pub fn dataset(cfg: &ExperimentConfig) -> Result<ToyDataset> {
    ToyDataset::ring(&cfg.dataset)
}

pub fn train_base(cfg: &ExperimentConfig) -> Result<(Denoiser, Vec<StepLog>)> {
    let data = dataset(cfg)?;
    diffusion::train_base(&data, &cfg.model, &cfg.schedule, &cfg.train, stage_seed(cfg, stage::TRAIN))
}

pub fn generate_store(cfg: &ExperimentConfig, base: &Denoiser) -> Result<TrajectoryStore> {
    let seed = stage_seed(cfg, stage::TRAJECTORIES);
    match cfg.trajectories.source {
        TrajectorySource::Guided => {
            trajectory::generate_guided_trajectories(base, &cfg.schedule, &cfg.trajectories, seed, cfg.hash())
        }
        TrajectorySource::Diffusion => trajectory::generate_diffusion_pairs(
            base,
            &dataset(cfg)?,
            &cfg.schedule,
            &cfg.trajectories,
            seed,
            cfg.hash(),
        ),
    }
}

pub fn new_stack(cfg: &ExperimentConfig, base: &Denoiser) -> Result<AdapterStack> {
    AdapterStack::new(cfg.adapter.clone(), base, stage_seed(cfg, stage::ADAPTER_INIT))
}

fn distill_cfg(cfg: &ExperimentConfig, mode: DistillMode) -> distill::DistillConfig {
    distill::DistillConfig {
        mode,
        seed: stage_seed(cfg, stage::DISTILL),
        ..cfg.distill.clone()
    }
}

pub fn distill_agd(
    cfg: &ExperimentConfig,
    store: &TrajectoryStore,
    base: &Denoiser,
) -> Result<(AdapterStack, DistillRun)> {
    let mut stack = new_stack(cfg, base)?;
    let run = distill::distill(store, base, &mut stack, &cfg.schedule, &distill_cfg(cfg, DistillMode::AgdAdapters))?;
    Ok((stack, run))
}

/// The fine-tuning baseline; its ω pathway uses the adapter encoder's
/// Fourier settings.
pub fn new_gd(cfg: &ExperimentConfig, base: &Denoiser) -> Result<GdModel> {
    let a = &cfg.adapter;
    let pathway = OmegaPathway::new(
        a.omega_frequencies,
        a.omega_scale,
        a.omega_norm,
        base.embed_dim(),
        Init::Xavier,
        stage_seed(cfg, stage::GD_INIT),
    )?;
    GdModel::new(base, pathway)
}

pub fn distill_gd(cfg: &ExperimentConfig, store: &TrajectoryStore, base: &Denoiser) -> Result<(GdModel, DistillRun)> {
    let mut gd = new_gd(cfg, base)?;
    let run = distill::gd_finetune(store, base, &mut gd, &cfg.schedule, &distill_cfg(cfg, DistillMode::GdFullFinetune))?;
    Ok((gd, run))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EndpointSummary {
    pub omega: f64,
    pub seeds: usize,
    pub agd: Option<f64>,
    pub gd: Option<f64>,
    pub unguided: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub sweep: EvalReport,
    pub endpoint: EndpointSummary,
    pub transfer: Option<TransferReport>,
}

impl Evaluation {
    /// Teacher-matching error at `hi` relative to `lo`.
    pub fn inflation(&self, method: Method, lo: f64, hi: f64) -> Option<f64> {
        let a = self.sweep.row(method, lo)?.endpoint_mse;
        let b = self.sweep.row(method, hi)?.endpoint_mse;
        Some(b / a)
    }

    pub fn report_text(&self, cfg: &ExperimentConfig) -> String {
        let e = &self.endpoint;
        let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), sig6);
        let mut sections = vec![(
            "endpoint".to_string(),
            vec![
                ("omega".to_string(), sig6(e.omega)),
                ("seeds".to_string(), e.seeds.to_string()),
                ("agd_vs_teacher".to_string(), opt(e.agd)),
                ("gd_vs_teacher".to_string(), opt(e.gd)),
                ("unguided_vs_teacher".to_string(), sig6(e.unguided)),
                ("agd_ratio".to_string(), opt(e.agd.map(|a| a / e.unguided))),
            ],
        )];
        let hi = cfg.trajectories.omega_range[1];
        let out = cfg.eval.omegas.iter().copied().find(|&w| w > hi);
        if let Some(out) = out {
            let lo = cfg.eval.endpoint_omega;
            sections.push((
                "out_of_range".to_string(),
                vec![
                    ("omega_in".to_string(), sig6(lo)),
                    ("omega_out".to_string(), sig6(out)),
                    ("agd_inflation".to_string(), opt(self.inflation(Method::Agd, lo, out))),
                    ("gd_inflation".to_string(), opt(self.inflation(Method::GdBaseline, lo, out))),
                ],
            ));
        }
        if let Some(t) = &self.transfer {
            sections.push(t.section());
        }
        eval::render_report(&self.sweep, &sections)
    }
}

/// Sweep, endpoint comparison and scheduler transfer for whichever students
/// are given. The teacher is the base under classifier-free guidance; the
/// unguided conditional model joins the sweep only alongside a student.
pub fn evaluate(
    cfg: &ExperimentConfig,
    base: &Denoiser,
    stack: Option<&AdapterStack>,
    gd: Option<&GdModel>,
) -> Result<Evaluation> {
    let data = dataset(cfg)?;
    let teacher = CfgTeacher::new(base);
    let guided = stack.map(|s| GuidedModel::new(base, s)).transpose()?;
    let mut models = vec![Candidate {
        method: Method::CfgTeacher,
        model: &teacher,
        param_ratio: 0.0,
    }];
    if let (Some(g), Some(s)) = (&guided, stack) {
        models.push(Candidate {
            method: Method::Agd,
            model: g,
            param_ratio: s.param_ratio(base),
        });
    }
    if let Some(g) = gd {
        models.push(Candidate {
            method: Method::GdBaseline,
            model: g,
            param_ratio: g.num_params() as f64 / base.num_params() as f64,
        });
    }
    if models.len() > 1 {
        models.push(Candidate {
            method: Method::Unguided,
            model: base,
            param_ratio: 0.0,
        });
    }
    let sweep = eval::guidance_sweep(&models, &data, &cfg.schedule, &cfg.eval, cfg.hash())?;

    let omega = cfg.eval.endpoint_omega;
    let (seeds, cond) = eval::eval_seeds(
        stage_seed(cfg, stage::ENDPOINT),
        cfg.eval.endpoint_seeds,
        base.num_classes(),
    );
    let kind = SamplerKind::DeterministicEuler;
    let reference = eval::sample_points(&teacher, &cfg.schedule, kind, &cond, omega, &seeds)?;
    let vs_teacher = |m: &(dyn diffusion::EpsModel + Sync)| -> Result<f64> {
        let x = eval::sample_points(m, &cfg.schedule, kind, &cond, omega, &seeds)?;
        Ok(x.sub(&reference)?.sum_squares() / seeds.len() as f64)
    };
    let endpoint = EndpointSummary {
        omega,
        seeds: seeds.len(),
        agd: guided.as_ref().map(|g| vs_teacher(g)).transpose()?,
        gd: gd.map(|g| vs_teacher(g)).transpose()?,
        unguided: vs_teacher(base)?,
    };
    let transfer = guided
        .as_ref()
        .map(|g| eval::scheduler_transfer(g, &teacher, &data, &cfg.schedule, cfg.eval.transfer_omega, &cfg.eval))
        .transpose()?;
    Ok(Evaluation {
        sweep,
        endpoint,
        transfer,
    })
}

/// Trajectory store and base compatibility for the distillation stage.
pub fn check_compatible(cfg: &ExperimentConfig, store: &TrajectoryStore, base: &Denoiser) -> Result<()> {
    store.check_schedule(&cfg.schedule)?;
    if store.header.teacher_hash != base.param_hash() {
        return Err(Error::Compatibility("store was generated by a different base model".into()));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Arch,
    Init,
    Loss,
    Source,
}

impl Ablation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "arch" => Ok(Ablation::Arch),
            "init" => Ok(Ablation::Init),
            "loss" => Ok(Ablation::Loss),
            "source" => Ok(Ablation::Source),
            _ => Err(Error::Config(format!("unknown ablation {s:?} (arch, init, loss, source)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Arch => "arch",
            Ablation::Init => "init",
            Ablation::Loss => "loss",
            Ablation::Source => "source",
        }
    }

    /// `(variant name, config override)` pairs.
    fn variants(self) -> Vec<(&'static str, String)> {
        let v: &[(&str, &str)] = match self {
            Ablation::Arch => &[
                ("cross_attention", "adapter.architecture=cross_attention"),
                ("offset", "adapter.architecture=offset"),
                ("gating", "adapter.architecture=gating"),
                ("positional", "adapter.architecture=positional"),
            ],
            Ablation::Init => &[("xavier", "adapter.init=xavier"), ("zero", "adapter.init=zero")],
            Ablation::Loss => &[
                ("l2", "distill.loss=l2"),
                ("l1", "distill.loss=l1"),
                ("weighted_l2", "distill.loss=weighted_l2"),
            ],
            Ablation::Source => &[
                ("guided", "trajectories.source=guided"),
                ("diffusion", "trajectories.source=diffusion"),
            ],
        };
        v.iter().map(|(n, o)| (*n, o.to_string())).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    /// Held-out `‖ε − ε̃‖²` on guided trajectories.
    pub held_out: f64,
    pub endpoint_mse: f64,
    pub param_ratio: f64,
    pub mean_step_ms: f64,
}

/// Train one adapter stack per variant and score each against the guided
/// teacher. Held-out error is always measured on the guided store, whatever
/// the training source.
pub fn ablate(
    cfg: &ExperimentConfig,
    base: &Denoiser,
    guided: Option<&TrajectoryStore>,
    what: Ablation,
) -> Result<Vec<AblationRow>> {
    let guided_cfg = with_overrides(cfg, &["trajectories.source=guided".to_string()])?;
    let owned;
    let guided = match guided {
        Some(s) if s.header.source == TrajectorySource::Guided => s,
        Some(_) => return Err(Error::Input("the ablation reference store must hold guided trajectories".into())),
        None => {
            owned = generate_store(&guided_cfg, base)?;
            &owned
        }
    };
    check_compatible(cfg, guided, base)?;
    let (_, held) = guided.split_held_out();
    let teacher = CfgTeacher::new(base);
    let omega = cfg.eval.endpoint_omega;
    let (seeds, cond) = eval::eval_seeds(
        stage_seed(cfg, stage::ENDPOINT),
        cfg.eval.endpoint_seeds,
        base.num_classes(),
    );
    let kind = SamplerKind::DeterministicEuler;
    let reference = eval::sample_points(&teacher, &cfg.schedule, kind, &cond, omega, &seeds)?;

    let mut rows = Vec::new();
    for (name, o) in what.variants() {
        let vcfg = with_overrides(cfg, &[o])?;
        let diffusion;
        let store = if vcfg.trajectories.source == TrajectorySource::Diffusion {
            diffusion = generate_store(&vcfg, base)?;
            &diffusion
        } else {
            guided
        };
        let (stack, run) = distill_agd(&vcfg, store, base)?;
        let g = GuidedModel::new(base, &stack)?;
        let x = eval::sample_points(&g, &cfg.schedule, kind, &cond, omega, &seeds)?;
        rows.push(AblationRow {
            variant: name.to_string(),
            held_out: distill::held_out_loss(&g, &held)?,
            endpoint_mse: x.sub(&reference)?.sum_squares() / seeds.len() as f64,
            param_ratio: run.param_ratio(),
            mean_step_ms: run.mean_step_ms(),
        });
        log::info!("ablation {} {name}: held-out {:.5}", what.name(), rows.last().unwrap().held_out);
    }
    Ok(rows)
}

/// Comparison table without timings.
pub fn render_ablation(what: Ablation, rows: &[AblationRow]) -> String {
    let mut s = format!(
        "ablation: {}\n{:>16} {:>13} {:>13} {:>13}\n",
        what.name(),
        "variant",
        "held_out",
        "endpoint_mse",
        "param_ratio"
    );
    for r in rows {
        s.push_str(&format!(
            "{:>16} {:>13} {:>13} {:>13}\n",
            r.variant,
            sig6(r.held_out),
            sig6(r.endpoint_mse),
            sig6(r.param_ratio)
        ));
    }
    s
}

/// Re-parse `cfg` with extra dotted overrides.
pub fn with_overrides(cfg: &ExperimentConfig, overrides: &[String]) -> Result<ExperimentConfig> {
    ExperimentConfig::from_toml(&cfg.canonical(), overrides)
}
