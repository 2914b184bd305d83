use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{energy_distance, knn_precision_recall};
use crate::diffusion::{sample, Cond, EpsModel, NoiseSchedule, SamplerKind, ToyDataset};
use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::rng::{self, tag};

const CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub omegas: Vec<f64>,
    /// Generated points per model and scale.
    pub samples: usize,
    pub real_samples: usize,
    pub k: usize,
    /// Paired seeds for the endpoint comparison.
    pub endpoint_seeds: usize,
    pub endpoint_omega: f64,
    pub transfer_omega: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            omegas: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 9.0],
            samples: 2048,
            real_samples: 4096,
            k: 5,
            endpoint_seeds: 512,
            endpoint_omega: 4.0,
            transfer_omega: 4.0,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = !self.omegas.is_empty()
            && self.omegas.iter().all(|w| w.is_finite() && *w >= 1.0)
            && self.samples > self.k
            && self.real_samples > self.k
            && self.k > 0
            && self.endpoint_seeds > 0
            && self.endpoint_omega >= 1.0
            && self.transfer_omega >= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid evaluation config {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    CfgTeacher,
    Agd,
    GdBaseline,
    Unguided,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::CfgTeacher, Method::Agd, Method::GdBaseline, Method::Unguided];

    pub fn name(self) -> &'static str {
        match self {
            Method::CfgTeacher => "cfg_teacher",
            Method::Agd => "agd",
            Method::GdBaseline => "gd_baseline",
            Method::Unguided => "unguided",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// A model under evaluation. The unguided entry is the conditional base,
/// which ignores the guidance scale.
#[derive(Clone, Copy)]
pub struct Candidate<'a> {
    pub method: Method,
    pub model: &'a (dyn EpsModel + Sync),
    pub param_ratio: f64,
}

/// Seeds and class labels shared by every model for one evaluation.
pub fn eval_seeds(seed: u64, n: usize, num_classes: usize) -> (Vec<u64>, Vec<Cond>) {
    let seeds = (0..n as u64).map(|i| rng::derive(seed, &[tag::EVAL, i])).collect();
    let cond = (0..n).map(|i| Cond::Class(i % num_classes)).collect();
    (seeds, cond)
}

/// Sample rows in parallel chunks; identical to one `sample` call.
pub fn sample_points<M: EpsModel + Sync + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    kind: SamplerKind,
    cond: &[Cond],
    omega: f64,
    seeds: &[u64],
) -> Result<Matrix> {
    let parts = seeds
        .par_chunks(CHUNK)
        .zip(cond.par_chunks(CHUNK))
        .map(|(s, c)| sample(model, schedule, kind, c, &vec![omega; s.len()], s))
        .collect::<Result<Vec<_>>>()?;
    Matrix::concat_rows(&parts.iter().collect::<Vec<_>>())
}

fn mean_sq_dist(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() || a.rows() == 0 {
        return Err(Error::dim("endpoint_mse", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.sub(b)?.sum_squares() / a.rows() as f64)
}

/// Mean `‖x₀ᴬ − x₀ᴮ‖²` over paired seeds.
#[allow(clippy::too_many_arguments)]
pub fn endpoint_mse<A, B>(
    a: &A,
    b: &B,
    schedule: &NoiseSchedule,
    kind: SamplerKind,
    seeds: &[u64],
    cond: &[Cond],
    omega: f64,
) -> Result<f64>
where
    A: EpsModel + Sync + ?Sized,
    B: EpsModel + Sync + ?Sized,
{
    if kind != SamplerKind::DeterministicEuler {
        return Err(Error::Input("endpoint comparison needs the deterministic sampler".into()));
    }
    let xa = sample_points(a, schedule, kind, cond, omega, seeds)?;
    let xb = sample_points(b, schedule, kind, cond, omega, seeds)?;
    mean_sq_dist(&xa, &xb)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub omega: f64,
    pub method: Method,
    pub endpoint_mse: f64,
    pub energy_distance: f64,
    pub precision: f64,
    pub recall: f64,
    pub nfe: u64,
    pub param_ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub config_hash: u64,
    pub seed: u64,
    pub num_steps: usize,
    pub samples: usize,
    pub rows: Vec<SweepRow>,
}

pub const SWEEP_COLUMNS: [&str; 12] = [
    "config_hash",
    "seed",
    "num_steps",
    "samples",
    "omega",
    "method",
    "endpoint_mse",
    "energy_distance",
    "precision",
    "recall",
    "nfe",
    "param_ratio",
];

impl EvalReport {
    pub fn row(&self, method: Method, omega: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.method == method && r.omega == omega)
    }

    /// Columns as in [`SWEEP_COLUMNS`]; floats use the shortest
    /// representation that parses back exactly.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::format("sweep csv", e.to_string());
        w.write_record(SWEEP_COLUMNS).map_err(err)?;
        for r in &self.rows {
            w.write_record([
                format!("{:016x}", self.config_hash),
                self.seed.to_string(),
                self.num_steps.to_string(),
                self.samples.to_string(),
                format!("{:?}", r.omega),
                r.method.name().to_string(),
                format!("{:?}", r.endpoint_mse),
                format!("{:?}", r.energy_distance),
                format!("{:?}", r.precision),
                format!("{:?}", r.recall),
                r.nfe.to_string(),
                format!("{:?}", r.param_ratio),
            ])
            .map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::format("sweep csv", e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::format("sweep csv", e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |d: String| Error::format("sweep csv", d);
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let header = rd.headers().map_err(|e| bad(e.to_string()))?;
        if header.iter().ne(SWEEP_COLUMNS) {
            return Err(bad(format!("unexpected header {header:?}")));
        }
        let mut meta: Option<(u64, u64, usize, usize)> = None;
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let f = |i: usize| -> Result<f64> { rec[i].parse().map_err(|_| bad(format!("bad number {:?}", &rec[i]))) };
            let u = |i: usize| -> Result<u64> { rec[i].parse().map_err(|_| bad(format!("bad integer {:?}", &rec[i]))) };
            let hash = u64::from_str_radix(&rec[0], 16).map_err(|_| bad(format!("bad hash {:?}", &rec[0])))?;
            let m = (hash, u(1)?, u(2)? as usize, u(3)? as usize);
            match meta {
                None => meta = Some(m),
                Some(prev) if prev != m => return Err(bad("rows disagree on run metadata".into())),
                _ => {}
            }
            rows.push(SweepRow {
                omega: f(4)?,
                method: Method::parse(&rec[5]).ok_or_else(|| bad(format!("unknown method {:?}", &rec[5])))?,
                endpoint_mse: f(6)?,
                energy_distance: f(7)?,
                precision: f(8)?,
                recall: f(9)?,
                nfe: u(10)?,
                param_ratio: f(11)?,
            });
        }
        let (config_hash, seed, num_steps, samples) = meta.ok_or_else(|| bad("no rows".into()))?;
        Ok(Self {
            config_hash,
            seed,
            num_steps,
            samples,
            rows,
        })
    }
}

/// Sample every candidate at every scale and score it against the data
/// and against the guided teacher (which must be among `models`).
pub fn guidance_sweep(
    models: &[Candidate<'_>],
    data: &ToyDataset,
    schedule: &NoiseSchedule,
    cfg: &EvalConfig,
    config_hash: u64,
) -> Result<EvalReport> {
    cfg.validate()?;
    let teacher = models
        .iter()
        .find(|m| m.method == Method::CfgTeacher)
        .ok_or_else(|| Error::Input("the sweep needs the guided teacher".into()))?;
    let real = data.sample_cycling(cfg.real_samples, rng::derive(cfg.seed, &[tag::DATA]));
    let (seeds, cond) = eval_seeds(cfg.seed, cfg.samples, data.num_classes());
    let kind = SamplerKind::DeterministicEuler;
    let mut rows = Vec::with_capacity(cfg.omegas.len() * models.len());
    for &omega in &cfg.omegas {
        let reference = sample_points(teacher.model, schedule, kind, &cond, omega, &seeds)?;
        for m in models {
            let before = m.model.nfe();
            let x = if m.method == Method::CfgTeacher {
                reference.clone()
            } else {
                sample_points(m.model, schedule, kind, &cond, omega, &seeds)?
            };
            let nfe = if m.method == Method::CfgTeacher {
                2 * (cfg.samples * schedule.num_steps) as u64
            } else {
                m.model.nfe() - before
            };
            let (precision, recall) = knn_precision_recall(&x, &real, cfg.k)?;
            rows.push(SweepRow {
                omega,
                method: m.method,
                endpoint_mse: mean_sq_dist(&x, &reference)?,
                energy_distance: energy_distance(&x, &real)?,
                precision,
                recall,
                nfe,
                param_ratio: m.param_ratio,
            });
            log::info!("sweep ω={omega} {}: ED {:.4}", m.method.name(), rows.last().unwrap().energy_distance);
        }
    }
    Ok(EvalReport {
        config_hash,
        seed: cfg.seed,
        num_steps: schedule.num_steps,
        samples: cfg.samples,
        rows,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferReport {
    pub omega: f64,
    pub teacher_euler: f64,
    pub teacher_em: f64,
    pub agd_euler: f64,
    pub agd_em: f64,
    pub nfe_teacher_em: u64,
    pub nfe_agd_em: u64,
}

/// Energy distance to data for the distilled model and the guided teacher
/// under both samplers.
pub fn scheduler_transfer<A, T>(
    agd: &A,
    teacher: &T,
    data: &ToyDataset,
    schedule: &NoiseSchedule,
    omega: f64,
    cfg: &EvalConfig,
) -> Result<TransferReport>
where
    A: EpsModel + Sync + ?Sized,
    T: EpsModel + Sync + ?Sized,
{
    cfg.validate()?;
    let real = data.sample_cycling(cfg.real_samples, rng::derive(cfg.seed, &[tag::DATA]));
    let (seeds, cond) = eval_seeds(cfg.seed, cfg.samples, data.num_classes());
    let ed = |m: &dyn Fn(SamplerKind) -> Result<Matrix>, k| -> Result<f64> { energy_distance(&m(k)?, &real) };
    let run_t = |k| sample_points(teacher, schedule, k, &cond, omega, &seeds);
    let run_a = |k| sample_points(agd, schedule, k, &cond, omega, &seeds);
    let teacher_euler = ed(&run_t, SamplerKind::DeterministicEuler)?;
    let agd_euler = ed(&run_a, SamplerKind::DeterministicEuler)?;
    let t0 = teacher.nfe();
    let teacher_em = ed(&run_t, SamplerKind::StochasticEm)?;
    let nfe_teacher_em = teacher.nfe() - t0;
    let a0 = agd.nfe();
    let agd_em = ed(&run_a, SamplerKind::StochasticEm)?;
    let nfe_agd_em = agd.nfe() - a0;
    Ok(TransferReport {
        omega,
        teacher_euler,
        teacher_em,
        agd_euler,
        agd_em,
        nfe_teacher_em,
        nfe_agd_em,
    })
}

/// `x` to 6 significant digits.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    format!("{x:.5e}")
}

/// Plain-text summary of a sweep table, optionally followed by extra
/// `key: value` sections.
pub fn render_report(report: &EvalReport, sections: &[(String, Vec<(String, String)>)]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "config_hash: {:016x}", report.config_hash);
    let _ = writeln!(s, "seed: {}", report.seed);
    let _ = writeln!(s, "num_steps: {}", report.num_steps);
    let _ = writeln!(s, "samples: {}", report.samples);
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "{:>8} {:>12} {:>13} {:>13} {:>13} {:>13} {:>10} {:>13}",
        "omega", "method", "endpoint_mse", "energy_dist", "precision", "recall", "nfe", "param_ratio"
    );
    for r in &report.rows {
        let _ = writeln!(
            s,
            "{:>8} {:>12} {:>13} {:>13} {:>13} {:>13} {:>10} {:>13}",
            sig6(r.omega),
            r.method.name(),
            sig6(r.endpoint_mse),
            sig6(r.energy_distance),
            sig6(r.precision),
            sig6(r.recall),
            r.nfe,
            sig6(r.param_ratio)
        );
    }
    for (title, items) in sections {
        let _ = writeln!(s, "\n[{title}]");
        for (k, v) in items {
            let _ = writeln!(s, "{k}: {v}");
        }
    }
    s
}

impl TransferReport {
    pub fn section(&self) -> (String, Vec<(String, String)>) {
        let items = [
            ("omega", sig6(self.omega)),
            ("teacher_euler_energy", sig6(self.teacher_euler)),
            ("teacher_em_energy", sig6(self.teacher_em)),
            ("agd_euler_energy", sig6(self.agd_euler)),
            ("agd_em_energy", sig6(self.agd_em)),
            ("nfe_teacher_em", self.nfe_teacher_em.to_string()),
            ("nfe_agd_em", self.nfe_agd_em.to_string()),
        ];
        ("scheduler_transfer".into(), items.into_iter().map(|(k, v)| (k.into(), v)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{AnalyticDenoiser, CfgTeacher};

    fn gaussian() -> ToyDataset {
        ToyDataset::single_gaussian(&[0.5, -1.0], 0.3).unwrap()
    }

    #[test]
    fn identical_models_have_zero_endpoint_distance() {
        let ds = gaussian();
        let m = AnalyticDenoiser::new(&ds);
        let (seeds, cond) = eval_seeds(1, 40, 1);
        let s = NoiseSchedule::default().with_steps(16);
        let v = endpoint_mse(&m, &m, &s, SamplerKind::DeterministicEuler, &seeds, &cond, 3.0).unwrap();
        assert_eq!(v, 0.0);
        assert!(endpoint_mse(&m, &m, &s, SamplerKind::StochasticEm, &seeds, &cond, 3.0).is_err());
    }

    #[test]
    fn chunked_sampling_matches_single_call() {
        let ds = gaussian();
        let m = AnalyticDenoiser::new(&ds);
        let s = NoiseSchedule::default().with_steps(8);
        let (seeds, cond) = eval_seeds(2, 600, 1);
        let a = sample_points(&m, &s, SamplerKind::StochasticEm, &cond, 1.0, &seeds).unwrap();
        let b = sample(&m, &s, SamplerKind::StochasticEm, &cond, &[1.0; 600], &seeds).unwrap();
        assert_eq!(a, b);
    }

    fn small_cfg() -> EvalConfig {
        EvalConfig {
            omegas: vec![1.0, 2.5],
            samples: 64,
            real_samples: 128,
            endpoint_seeds: 16,
            ..EvalConfig::default()
        }
    }

    #[test]
    fn teacher_only_sweep_and_csv_round_trip() {
        let ds = gaussian();
        let m = AnalyticDenoiser::new(&ds);
        let t = CfgTeacher::new(&m);
        let s = NoiseSchedule::default().with_steps(8);
        let models = [Candidate {
            method: Method::CfgTeacher,
            model: &t,
            param_ratio: 0.0,
        }];
        let r = guidance_sweep(&models, &ds, &s, &small_cfg(), 0xabc).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert!(r.rows.iter().all(|row| row.endpoint_mse == 0.0 && row.nfe == 2 * 64 * 8));
        let back = EvalReport::from_csv(&r.to_csv().unwrap()).unwrap();
        assert_eq!(back, r);
        assert!(EvalReport::from_csv("a,b\n1,2\n").is_err());
    }

    #[test]
    fn sweep_counts_single_pass_models() {
        let ds = gaussian();
        let m = AnalyticDenoiser::new(&ds);
        let t = CfgTeacher::new(&m);
        let s = NoiseSchedule::default().with_steps(8);
        let models = [
            Candidate {
                method: Method::CfgTeacher,
                model: &t,
                param_ratio: 0.0,
            },
            Candidate {
                method: Method::Unguided,
                model: &m,
                param_ratio: 0.0,
            },
        ];
        let r = guidance_sweep(&models, &ds, &s, &small_cfg(), 1).unwrap();
        assert_eq!(r.rows.len(), 4);
        let teacher = r.row(Method::CfgTeacher, 2.5).unwrap();
        let plain = r.row(Method::Unguided, 2.5).unwrap();
        assert_eq!(teacher.nfe, 2 * plain.nfe);
        // a single-class model is unaffected by guidance
        assert!(plain.endpoint_mse < 1e-20);
        assert_eq!(r.row(Method::Unguided, 1.0).unwrap().endpoint_mse, 0.0);
        let text = render_report(&r, &[]);
        assert!(text.contains("cfg_teacher") && text.contains("0000000000000001"));
    }

    #[test]
    fn transfer_counts_two_to_one() {
        let ds = gaussian();
        let m = AnalyticDenoiser::new(&ds);
        let t = CfgTeacher::new(&m);
        let s = NoiseSchedule::default().with_steps(8);
        let r = scheduler_transfer(&m, &t, &ds, &s, 2.0, &small_cfg()).unwrap();
        assert_eq!(r.nfe_teacher_em, 2 * r.nfe_agd_em);
        assert_eq!(r.nfe_agd_em, 64 * 8);
        assert!(r.teacher_em >= 0.0 && r.agd_em >= 0.0);
    }

    #[test]
    fn sig6_rounds() {
        assert_eq!(sig6(1234567.0), "1.23457e6");
        assert_eq!(sig6(0.0), "0");
        assert_eq!(sig6(-0.000123456789), "-1.23457e-4");
    }
}
