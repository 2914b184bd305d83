use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use agd::checkpoint::{AdapterSection, Checkpoint};
use agd::config::ExperimentConfig;
use agd::pipeline;
use tempfile::TempDir;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn smoke() -> PathBuf {
    configs().join("smoke.toml")
}

fn agd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_agd"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[track_caller]
fn ok(args: &[&str]) -> String {
    let o = agd(args);
    assert_eq!(code(&o), 0, "{args:?}\n{}", stderr(&o));
    stdout(&o)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Smoke-config base, store and both students in a fresh directory.
struct Artifacts {
    dir: TempDir,
}

impl Artifacts {
    fn new() -> Self {
        let a = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        let c = smoke();
        ok(&["train-base", "-c", s(&c), "-o", s(&a.base())]);
        ok(&["gen-traj", "-c", s(&c), "--base", s(&a.base()), "-o", s(&a.store())]);
        ok(&[
            "distill", "-c", s(&c), "--base", s(&a.base()), "--store", s(&a.store()), "-o", s(&a.adapters()),
        ]);
        ok(&[
            "distill", "-c", s(&c), "--base", s(&a.base()), "--store", s(&a.store()), "-o", s(&a.gd()), "--mode",
            "gd-full-finetune",
        ]);
        a
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn base(&self) -> PathBuf {
        self.path("base.agdk")
    }

    fn store(&self) -> PathBuf {
        self.path("traj.agdt")
    }

    fn adapters(&self) -> PathBuf {
        self.path("adapters.agdk")
    }

    fn gd(&self) -> PathBuf {
        self.path("gd.agdk")
    }
}

#[test]
fn missing_config_names_the_path() {
    let o = agd(&["train-base", "-c", "/no/such/dir/exp.toml", "-o", "/tmp/unused.agdk"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("/no/such/dir/exp.toml"), "{}", stderr(&o));
}

#[test]
fn invalid_configs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[model]\nwidht = 3\n").unwrap();
    let out = dir.path().join("b.agdk");
    assert_eq!(code(&agd(&["train-base", "-c", s(&bad), "-o", s(&out)])), 2);
    let o = agd(&["train-base", "-c", s(&smoke()), "--set", "eval.omegas=[0.5]", "-o", s(&out)]);
    assert_eq!(code(&o), 2);
    // usage errors share the config exit code
    assert_eq!(code(&agd(&["train-base"])), 2);
    assert!(!out.exists());
}

#[test]
fn train_base_is_deterministic_and_logs_every_step() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.agdk"), dir.path().join("b.agdk"));
    let out = ok(&["train-base", "-c", s(&smoke()), "-o", s(&a)]);
    assert!(out.contains("final loss:"));
    ok(&["--threads", "2", "train-base", "-c", s(&smoke()), "-o", s(&b)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let cfg = ExperimentConfig::load(&smoke(), &[]).unwrap();
    let csv = fs::read_to_string(dir.path().join("a.agdk.loss.csv")).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], "config_hash,step,loss,lr,wall_ms");
    assert_eq!(lines.len() - 1, cfg.train.steps);
    assert!(lines[1].starts_with(&format!("{:016x},0,", cfg.hash())));
}

#[test]
fn trajectory_generation_counts_and_regenerates() {
    let dir = tempfile::tempdir().unwrap();
    let c = smoke();
    let base = dir.path().join("base.agdk");
    let n64 = ["--set", "schedule.num_steps=64", "--set", "trajectories.count=10"];
    let mut args = vec!["train-base", "-c", s(&c), "-o", s(&base)];
    args.extend(n64);
    ok(&args);

    let (a, b) = (dir.path().join("a.agdt"), dir.path().join("b.agdt"));
    for out in [&a, &b] {
        let mut args = vec!["gen-traj", "-c", s(&c), "--base", s(&base), "-o", s(out)];
        args.extend(n64);
        ok(&args);
    }
    let info = ok(&["store-info", s(&a)]);
    assert!(info.contains("records: 640"), "{info}");
    assert!(info.contains("source: guided"));
    assert_eq!(info, ok(&["store-info", s(&b)]));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let mut args = vec!["gen-traj", "-c", s(&c), "--base", s(&base), "-o", s(&b), "--source", "diffusion"];
    args.extend(n64);
    ok(&args);
    let info = ok(&["store-info", s(&b)]);
    assert!(info.contains("source: diffusion"));
    assert!(info.contains("records: 640"));

    // the checkpoint was trained on a 64-step grid; the smoke config has 16
    let o = agd(&["gen-traj", "-c", s(&c), "--base", s(&base), "-o", s(&b)]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn distill_summaries_and_zero_steps() {
    let a = Artifacts::new();
    let c = smoke();
    let zero = a.path("zero.agdk");
    let out = ok(&[
        "distill", "-c", s(&c), "--set", "distill.steps=0", "--base", s(&a.base()), "--store", s(&a.store()), "-o",
        s(&zero),
    ]);
    assert!(out.contains("param_ratio:"));
    assert!(out.contains("base_hash_unchanged: true"));

    let cfg = ExperimentConfig::load(&c, &["distill.steps=0".into()]).unwrap();
    let base = Checkpoint::read(&a.base()).unwrap().base.unwrap().model;
    let init = pipeline::new_stack(&cfg, &base).unwrap();
    let want = Checkpoint::adapters_only(AdapterSection::from_stack(&init, &base, cfg.hash()));
    assert_eq!(fs::read(&zero).unwrap(), want.encode());

    let csv = fs::read_to_string(a.path("gd.agdk.loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + ExperimentConfig::load(&c, &[]).unwrap().distill.steps);
}

fn ratio(summary: &str) -> f64 {
    summary
        .lines()
        .find_map(|l| l.strip_prefix("param_ratio: "))
        .expect("summary has a ratio")
        .parse()
        .unwrap()
}

#[test]
fn parameter_ratios_on_the_default_model() {
    // untrained default-size base; only the parameter counts matter here
    let dir = tempfile::tempdir().unwrap();
    let c = configs().join("default.toml");
    let fast = [
        "--set", "train.steps=0", "--set", "trajectories.count=10", "--set", "distill.steps=2",
    ];
    let base = dir.path().join("base.agdk");
    let store = dir.path().join("s.agdt");
    let run = |args: &[&str]| {
        let mut v = args.to_vec();
        v.extend(fast);
        ok(&v)
    };
    run(&["train-base", "-c", s(&c), "-o", s(&base)]);
    run(&["gen-traj", "-c", s(&c), "--base", s(&base), "-o", s(&store)]);
    let common = ["-c", s(&c), "--base", s(&base), "--store", s(&store)];
    let agd_out = dir.path().join("a.agdk");
    let gd_out = dir.path().join("g.agdk");
    let mut a = vec!["distill"];
    a.extend(common);
    a.extend(["-o", s(&agd_out)]);
    let r = ratio(&run(&a));
    assert!((0.01..=0.05).contains(&r), "{r}");
    let mut g = vec!["distill"];
    g.extend(common);
    g.extend(["-o", s(&gd_out), "--mode", "gd-full-finetune"]);
    let r = ratio(&run(&g));
    assert!((1.0..1.05).contains(&r), "{r}");
}

fn sweep_rows(dir: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(dir.join("sweep.csv")).unwrap();
    text.lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn evaluation_outputs() {
    let a = Artifacts::new();
    let c = smoke();
    let cfg = ExperimentConfig::load(&c, &[]).unwrap();
    let hash = format!("{:016x}", cfg.hash());

    let teacher = a.path("teacher");
    ok(&["eval", "-c", s(&c), "--base", s(&a.base()), "-o", s(&teacher)]);
    let rows = sweep_rows(&teacher);
    assert_eq!(rows.len(), cfg.eval.omegas.len());
    assert!(rows.iter().all(|r| r[0] == hash && r[5] == "cfg_teacher" && r[6] == "0.0"));

    let full = a.path("full");
    let report = ok(&[
        "eval", "-c", s(&c), "--base", s(&a.base()), "--adapters", s(&a.adapters()), "--gd", s(&a.gd()), "-o",
        s(&full),
    ]);
    let rows = sweep_rows(&full);
    assert_eq!(rows.len(), cfg.eval.omegas.len() * 4);
    assert!(rows.iter().all(|r| r[0] == hash));
    let text = fs::read_to_string(full.join("report.txt")).unwrap();
    assert_eq!(text, report);
    assert!(text.starts_with(&format!("config_hash: {hash}\n")));
    for section in ["[endpoint]", "[out_of_range]", "[scheduler_transfer]"] {
        assert!(text.contains(section), "{section}");
    }

    // same inputs, same bytes
    let again = a.path("again");
    ok(&[
        "--threads", "1", "eval", "-c", s(&c), "--base", s(&a.base()), "--adapters", s(&a.adapters()), "--gd",
        s(&a.gd()), "-o", s(&again),
    ]);
    assert_eq!(fs::read(full.join("report.txt")).unwrap(), fs::read(again.join("report.txt")).unwrap());
    assert_eq!(fs::read(full.join("sweep.csv")).unwrap(), fs::read(again.join("sweep.csv")).unwrap());
}

#[test]
fn mixed_config_hashes_need_force() {
    let a = Artifacts::new();
    let c = smoke();
    let other = a.path("other.agdk");
    ok(&[
        "distill", "-c", s(&c), "--set", "distill.steps=3", "--base", s(&a.base()), "--store", s(&a.store()), "-o",
        s(&other),
    ]);
    let base = a.base();
    let args = ["eval", "-c", s(&c), "--base", s(&base), "--adapters", s(&other), "-o"];
    let out = a.path("mixed");
    let mut v = args.to_vec();
    v.push(s(&out));
    let o = agd(&v);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("--force"));
    v.push("--force");
    ok(&v);
    assert!(out.join("report.txt").exists());
}

#[test]
fn exit_codes() {
    let a = Artifacts::new();
    let c = smoke();
    let out = a.path("x.agdk");

    // numeric failure
    let o = agd(&[
        "distill", "-c", s(&c), "--set", "distill.peak_lr=1e200", "--set", "distill.grad_clip=0.0", "--base",
        s(&a.base()), "--store", s(&a.store()), "-o", s(&out),
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));

    // a store recorded by another base
    let other = a.path("other.agdk");
    ok(&["train-base", "-c", s(&c), "--set", "seed=5", "-o", s(&other)]);
    let o = agd(&["distill", "-c", s(&c), "--base", s(&other), "--store", s(&a.store()), "-o", s(&out)]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));

    // adapters on the wrong base
    let o = agd(&[
        "eval", "-c", s(&c), "--set", "seed=5", "--base", s(&other), "--adapters", s(&a.adapters()), "--force",
        "-o", s(&a.path("ev")),
    ]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));

    // truncated checkpoint
    let bytes = fs::read(a.base()).unwrap();
    fs::write(&out, &bytes[..bytes.len() / 2]).unwrap();
    let o = agd(&["gen-traj", "-c", s(&c), "--base", s(&out), "-o", s(&a.path("t.agdt"))]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));

    // a store where a checkpoint is expected, and vice versa
    let o = agd(&["gen-traj", "-c", s(&c), "--base", s(&a.store()), "-o", s(&a.path("t.agdt"))]);
    assert_eq!(code(&o), 4);
    assert_eq!(code(&agd(&["store-info", s(&a.base())])), 4);
    assert_eq!(code(&agd(&["store-info", s(&a.path("missing.agdt"))])), 2);
}

#[test]
fn sampling_writes_one_row_per_sample() {
    let a = Artifacts::new();
    let c = smoke();
    let out = a.path("x.csv");
    ok(&[
        "sample", "-c", s(&c), "--base", s(&a.base()), "--adapters", s(&a.adapters()), "-n", "10", "--class", "3",
        "--sampler", "em", "-o", s(&out),
    ]);
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], "config_hash,method,sampler,omega,class,x0,x1");
    assert_eq!(lines.len(), 11);
    assert!(lines[1..].iter().all(|l| l.contains(",agd,stochastic_em,4.0,3,")));

    // teacher and unguided agree at unit guidance
    let (t, u) = (a.path("t.csv"), a.path("u.csv"));
    for (m, p) in [("teacher", &t), ("unguided", &u)] {
        ok(&["sample", "-c", s(&c), "--base", s(&a.base()), "--method", m, "--omega", "1", "-n", "8", "-o", s(p)]);
    }
    let pts = |p: &Path| -> Vec<String> {
        fs::read_to_string(p)
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.splitn(4, ',').nth(3).unwrap().to_string())
            .collect()
    };
    assert_eq!(pts(&t), pts(&u));

    let o = agd(&["sample", "-c", s(&c), "--base", s(&a.base()), "--method", "gd", "-o", s(&out)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn architecture_ablation_table() {
    let a = Artifacts::new();
    let c = smoke();
    let out = a.path("abl");
    let table = ok(&["ablate", "arch", "-c", s(&c), "--base", s(&a.base()), "--store", s(&a.store()), "-o", s(&out)]);
    for v in ["cross_attention", "offset", "gating", "positional"] {
        assert!(table.contains(v), "{v}");
    }
    let csv = fs::read_to_string(out.join("ablation_arch.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert_eq!(fs::read_to_string(out.join("ablation_arch.txt")).unwrap(), table);

    let ev = a.path("ev");
    ok(&["eval", "-c", s(&c), "--base", s(&a.base()), "-o", s(&ev), "--ablate", "source"]);
    let csv = fs::read_to_string(ev.join("ablation_source.csv")).unwrap();
    assert!(csv.contains(",source,guided,") && csv.contains(",source,diffusion,"));
    assert!(ev.join("sweep.csv").exists());
}
