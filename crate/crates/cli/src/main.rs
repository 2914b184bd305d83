use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use agd::adapters::{AdapterStack, GuidedModel};
use agd::checkpoint::{AdapterSection, Checkpoint, GdSection};
use agd::config::ExperimentConfig;
use agd::diffusion::{sample, write_log_csv, CfgTeacher, Cond, Denoiser, EpsModel, SamplerKind};
use agd::distill::{DistillMode, GdModel};
use agd::eval::Method;
use agd::pipeline::{self, Ablation};
use agd::rng::{self, tag};
use agd::trajectory::{TrajectorySource, TrajectoryStore};
use agd::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Adapter guidance distillation experiments on a 2-D toy mixture.
#[derive(Parser, Debug)]
#[command(name = "agd", version)]
struct Cli {
    /// Worker threads for parallel sampling and evaluation.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// TOML experiment config.
    #[arg(long, short)]
    config: PathBuf,

    /// Override a config key, e.g. `--set distill.steps=100`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(&self.config, &self.overrides)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the base denoiser.
    TrainBase {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output checkpoint.
        #[arg(long, short)]
        out: PathBuf,
        /// Training-loss CSV (defaults to `<out>.loss.csv`).
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Record teacher trajectories into a `.agdt` store.
    GenTraj {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        base: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        /// Record guided trajectories or noised data pairs (overrides
        /// `trajectories.source`).
        #[arg(long, value_enum)]
        source: Option<SourceArg>,
    },
    /// Print the header and checksum of a store.
    StoreInfo { store: PathBuf },
    /// Train adapters (or the fine-tuning baseline) on a store.
    Distill {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        /// Defaults to `distill.mode`; the flag leaves the config hash as is.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Training-loss CSV (defaults to `<out>.loss.csv`).
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Draw samples from one method and write them as CSV.
    Sample {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        adapters: Option<PathBuf>,
        #[arg(long)]
        gd: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "agd")]
        method: MethodArg,
        #[arg(long, default_value_t = 4.0)]
        omega: f64,
        #[arg(long, short, default_value_t = 1024)]
        n: usize,
        /// Class label for every sample; cycles through classes when absent.
        #[arg(long)]
        class: Option<usize>,
        #[arg(long, value_enum, default_value = "euler")]
        sampler: SamplerArg,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Guidance sweep, endpoint comparison and scheduler transfer.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        adapters: Option<PathBuf>,
        #[arg(long)]
        gd: Option<PathBuf>,
        /// Output directory for `sweep.csv` and `report.txt`.
        #[arg(long, short = 'o')]
        out_dir: PathBuf,
        /// Accept inputs produced under different configs.
        #[arg(long)]
        force: bool,
        /// Also run an ablation over the given axis.
        #[arg(long, value_enum)]
        ablate: Option<AblateArg>,
        /// Guided store for the ablation; regenerated when absent.
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Train one adapter stack per variant of an ablation axis and compare.
    Ablate {
        #[arg(value_enum)]
        axis: AblateArg,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        base: PathBuf,
        /// Guided store; regenerated when absent.
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long, short = 'o')]
        out_dir: PathBuf,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SourceArg {
    Guided,
    Diffusion,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ModeArg {
    AgdAdapters,
    GdFullFinetune,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum MethodArg {
    Teacher,
    Agd,
    Gd,
    Unguided,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SamplerArg {
    Euler,
    Em,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum AblateArg {
    Arch,
    Init,
    Loss,
    Source,
}

impl From<AblateArg> for Ablation {
    fn from(a: AblateArg) -> Self {
        match a {
            AblateArg::Arch => Ablation::Arch,
            AblateArg::Init => Ablation::Init,
            AblateArg::Loss => Ablation::Loss,
            AblateArg::Source => Ablation::Source,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot size the thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::TrainBase { cfg, out, loss_csv } => train_base(&cfg.load()?, &out, loss_csv),
        Command::GenTraj { cfg, base, out, source } => {
            let mut overrides = cfg.overrides.clone();
            if let Some(s) = source {
                let name = match s {
                    SourceArg::Guided => TrajectorySource::Guided,
                    SourceArg::Diffusion => TrajectorySource::Diffusion,
                };
                overrides.push(format!("trajectories.source={}", name.name()));
            }
            gen_traj(&ExperimentConfig::load(&cfg.config, &overrides)?, &base, &out)
        }
        Command::StoreInfo { store } => {
            print!("{}", TrajectoryStore::read(&store)?.info());
            Ok(())
        }
        Command::Distill {
            cfg,
            base,
            store,
            out,
            mode,
            loss_csv,
        } => {
            let c = cfg.load()?;
            let mode = match mode {
                Some(ModeArg::AgdAdapters) => DistillMode::AgdAdapters,
                Some(ModeArg::GdFullFinetune) => DistillMode::GdFullFinetune,
                None => c.distill.mode,
            };
            distill(&c, mode, &base, &store, &out, loss_csv)
        }
        Command::Sample {
            cfg,
            base,
            adapters,
            gd,
            method,
            omega,
            n,
            class,
            sampler,
            out,
        } => {
            let c = cfg.load()?;
            let models = Models::load(&base, adapters.as_deref(), gd.as_deref(), &c, false)?;
            draw(&c, &models, method, omega, n, class, sampler, &out)
        }
        Command::Eval {
            cfg,
            base,
            adapters,
            gd,
            out_dir,
            force,
            ablate,
            store,
        } => {
            let c = cfg.load()?;
            let models = Models::load(&base, adapters.as_deref(), gd.as_deref(), &c, force)?;
            evaluate(&c, &models, &out_dir)?;
            if let Some(axis) = ablate {
                run_ablation(&c, &models.base, store.as_deref(), axis.into(), &out_dir)?;
            }
            Ok(())
        }
        Command::Ablate {
            axis,
            cfg,
            base,
            store,
            out_dir,
        } => {
            let c = cfg.load()?;
            let models = Models::load(&base, None, None, &c, false)?;
            run_ablation(&c, &models.base, store.as_deref(), axis.into(), &out_dir)
        }
    }
}

fn default_csv(out: &Path, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".loss.csv");
        PathBuf::from(s)
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn train_base(cfg: &ExperimentConfig, out: &Path, loss_csv: Option<PathBuf>) -> Result<()> {
    let (model, log) = pipeline::train_base(cfg)?;
    Checkpoint::base(&model, &cfg.schedule, cfg.hash()).write(out)?;
    let csv = default_csv(out, loss_csv);
    write_log_csv(&log, &csv, cfg.hash())?;
    match log.last() {
        Some(l) => println!("final loss: {:.6e}", l.loss),
        None => println!("final loss: n/a"),
    }
    println!("checkpoint: {}", out.display());
    println!("param_hash: {:016x}", model.param_hash());
    Ok(())
}

/// Base model from a checkpoint, checked against the config.
fn load_base(path: &Path, cfg: &ExperimentConfig) -> Result<(Denoiser, u64)> {
    let ckpt = Checkpoint::read(path)?;
    let base = ckpt.require_base()?;
    if base.schedule != cfg.schedule {
        return Err(Error::Compatibility(format!(
            "{}: checkpoint noise schedule differs from the config",
            path.display()
        )));
    }
    if base.model.spec() != &cfg.model {
        return Err(Error::Compatibility(format!(
            "{}: checkpoint model spec differs from the config",
            path.display()
        )));
    }
    Ok((base.model.clone(), base.config_hash))
}

fn gen_traj(cfg: &ExperimentConfig, base: &Path, out: &Path) -> Result<()> {
    let (model, _) = load_base(base, cfg)?;
    let store = pipeline::generate_store(cfg, &model)?;
    store.write(out)?;
    print!("{}", store.info());
    Ok(())
}

fn distill(cfg: &ExperimentConfig, mode: DistillMode, base: &Path, store: &Path, out: &Path, loss_csv: Option<PathBuf>) -> Result<()> {
    let (model, _) = load_base(base, cfg)?;
    let store = TrajectoryStore::read(store)?;
    pipeline::check_compatible(cfg, &store, &model)?;
    let (ckpt, run) = match mode {
        DistillMode::AgdAdapters => {
            let (stack, run) = pipeline::distill_agd(cfg, &store, &model)?;
            let section = AdapterSection::from_stack(&stack, &model, cfg.hash());
            (Checkpoint::adapters_only(section), run)
        }
        DistillMode::GdFullFinetune => {
            let (gd, run) = pipeline::distill_gd(cfg, &store, &model)?;
            let ckpt = Checkpoint {
                gd: Some(GdSection::from_model(&gd, &model, cfg.hash())),
                ..Checkpoint::default()
            };
            (ckpt, run)
        }
    };
    ckpt.write(out)?;
    run.write_csv(&default_csv(out, loss_csv), cfg.hash())?;
    print!("{}", run.summary());
    println!("checkpoint: {}", out.display());
    Ok(())
}

/// Base plus optional students, with their provenance hashes.
struct Models {
    base: Denoiser,
    stack: Option<AdapterStack>,
    gd: Option<GdModel>,
}

impl Models {
    fn load(
        base: &Path,
        adapters: Option<&Path>,
        gd: Option<&Path>,
        cfg: &ExperimentConfig,
        force: bool,
    ) -> Result<Self> {
        let (model, base_hash) = load_base(base, cfg)?;
        let mut hashes = vec![(base.to_path_buf(), base_hash)];
        let mut stack = None;
        let mut gd_model = None;
        if let Some(p) = adapters {
            let ckpt = Checkpoint::read(p)?;
            let s = ckpt
                .adapters
                .as_ref()
                .ok_or_else(|| Error::Compatibility(format!("{}: no adapter section", p.display())))?;
            check_base_hash(p, s.base_hash, &model)?;
            hashes.push((p.to_path_buf(), s.config_hash));
            stack = Some(s.into_stack(&model)?);
        }
        if let Some(p) = gd {
            let ckpt = Checkpoint::read(p)?;
            let s = ckpt
                .gd
                .as_ref()
                .ok_or_else(|| Error::Compatibility(format!("{}: no fine-tuning section", p.display())))?;
            check_base_hash(p, s.base_hash, &model)?;
            hashes.push((p.to_path_buf(), s.config_hash));
            gd_model = Some(s.into_model(&model)?);
        }
        let (first_path, first) = &hashes[0];
        if let Some((p, h)) = hashes.iter().find(|(_, h)| h != first) {
            let msg = format!(
                "{} has config hash {h:016x} but {} has {first:016x}",
                p.display(),
                first_path.display()
            );
            if !force {
                return Err(Error::Compatibility(format!("{msg}; pass --force to evaluate anyway")));
            }
            log::warn!("{msg}");
        }
        if *first != cfg.hash() {
            log::warn!(
                "inputs were produced under config {first:016x}, evaluating with {:016x}",
                cfg.hash()
            );
        }
        Ok(Self {
            base: model,
            stack,
            gd: gd_model,
        })
    }
}

/// Students are only meaningful on the base they were distilled from.
fn check_base_hash(path: &Path, recorded: u64, base: &Denoiser) -> Result<()> {
    if recorded != base.param_hash() {
        return Err(Error::Compatibility(format!(
            "{} was trained on base {recorded:016x}, not {:016x}",
            path.display(),
            base.param_hash()
        )));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn draw(
    cfg: &ExperimentConfig,
    models: &Models,
    method: MethodArg,
    omega: f64,
    n: usize,
    class: Option<usize>,
    sampler: SamplerArg,
    out: &Path,
) -> Result<()> {
    let classes = models.base.num_classes();
    if let Some(c) = class.filter(|&c| c >= classes) {
        return Err(Error::Input(format!("class {c} out of range for {classes} classes")));
    }
    let seeds: Vec<u64> = (0..n as u64)
        .map(|i| rng::derive(cfg.seed, &[tag::EVAL, 0x5a, i]))
        .collect();
    let cond: Vec<Cond> = (0..n).map(|i| Cond::Class(class.unwrap_or(i % classes))).collect();
    let kind = match sampler {
        SamplerArg::Euler => SamplerKind::DeterministicEuler,
        SamplerArg::Em => SamplerKind::StochasticEm,
    };
    let teacher = CfgTeacher::new(&models.base);
    let guided = models
        .stack
        .as_ref()
        .map(|s| GuidedModel::new(&models.base, s))
        .transpose()?;
    let (name, model): (Method, &dyn EpsModel) = match method {
        MethodArg::Teacher => (Method::CfgTeacher, &teacher),
        MethodArg::Unguided => (Method::Unguided, &models.base),
        MethodArg::Agd => (
            Method::Agd,
            guided
                .as_ref()
                .ok_or_else(|| Error::Input("--method agd needs --adapters".into()))?,
        ),
        MethodArg::Gd => (
            Method::GdBaseline,
            models
                .gd
                .as_ref()
                .ok_or_else(|| Error::Input("--method gd needs --gd".into()))?,
        ),
    };
    let x = sample(model, &cfg.schedule, kind, &cond, &vec![omega; n], &seeds)?;
    let mut text = String::from("config_hash,method,sampler,omega,class,x0,x1\n");
    for (i, c) in cond.iter().enumerate() {
        let Cond::Class(k) = c else { unreachable!() };
        let r = x.row(i);
        text.push_str(&format!(
            "{:016x},{},{},{omega:?},{k},{:?},{:?}\n",
            cfg.hash(),
            name.name(),
            kind.name(),
            r[0],
            r[1]
        ));
    }
    write_text(out, &text)?;
    println!("{n} samples from {} written to {}", name.name(), out.display());
    Ok(())
}

fn evaluate(cfg: &ExperimentConfig, models: &Models, out_dir: &Path) -> Result<()> {
    create_dir(out_dir)?;
    let ev = pipeline::evaluate(cfg, &models.base, models.stack.as_ref(), models.gd.as_ref())?;
    write_text(&out_dir.join("sweep.csv"), &ev.sweep.to_csv()?)?;
    let report = ev.report_text(cfg);
    write_text(&out_dir.join("report.txt"), &report)?;
    print!("{report}");
    Ok(())
}

fn run_ablation(
    cfg: &ExperimentConfig,
    base: &Denoiser,
    store: Option<&Path>,
    axis: Ablation,
    out_dir: &Path,
) -> Result<()> {
    create_dir(out_dir)?;
    let store = store.map(TrajectoryStore::read).transpose()?;
    let rows = pipeline::ablate(cfg, base, store.as_ref(), axis)?;
    let mut csv = String::from("config_hash,ablation,variant,held_out,endpoint_mse,param_ratio,mean_step_ms\n");
    for r in &rows {
        csv.push_str(&format!(
            "{:016x},{},{},{:?},{:?},{:?},{:.3}\n",
            cfg.hash(),
            axis.name(),
            r.variant,
            r.held_out,
            r.endpoint_mse,
            r.param_ratio,
            r.mean_step_ms
        ));
    }
    write_text(&out_dir.join(format!("ablation_{}.csv", axis.name())), &csv)?;
    let table = format!(
        "config_hash: {:016x}\n{}",
        cfg.hash(),
        pipeline::render_ablation(axis, &rows)
    );
    write_text(&out_dir.join(format!("ablation_{}.txt", axis.name())), &table)?;
    print!("{table}");
    Ok(())
}
