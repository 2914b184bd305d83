use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::dataset::{Cond, ToyDataset};
use super::denoiser::Denoiser;
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::rng::{self, tag, Rng};

/// Anything that predicts ε for a batch of rows.
pub trait EpsModel {
    fn data_dim(&self) -> usize;

    /// Per-row noise levels, conditions and guidance scales.
    fn predict(&self, x: &Matrix, sigma: &[f64], cond: &[Cond], omega: &[f64]) -> Result<Matrix>;

    /// Cumulative network row evaluations (one per sample per pass).
    fn nfe(&self) -> u64;
}

/// The base network used as a plain conditional model; ω is ignored.
impl EpsModel for Denoiser {
    fn data_dim(&self) -> usize {
        Denoiser::data_dim(self)
    }

    fn predict(&self, x: &Matrix, sigma: &[f64], cond: &[Cond], _omega: &[f64]) -> Result<Matrix> {
        self.eps(x, sigma, cond)
    }

    fn nfe(&self) -> u64 {
        Denoiser::nfe(self)
    }
}

/// `ω ε_c − (ω − 1) ε_u`, evaluated as `ε_c + (ω − 1)(ε_c − ε_u)` so that
/// `ω = 1` and `ε_c = ε_u` both return `ε_c` exactly.
pub fn cfg_combine(eps_cond: &[f64], eps_uncond: &[f64], omega: f64) -> Vec<f64> {
    eps_cond
        .iter()
        .zip(eps_uncond)
        .map(|(c, u)| c + (omega - 1.0) * (c - u))
        .collect()
}

/// Classifier-free guidance around a conditional model: two passes per call.
pub struct CfgTeacher<'a, M: ?Sized> {
    pub inner: &'a M,
}

impl<'a, M: EpsModel + ?Sized> CfgTeacher<'a, M> {
    pub fn new(inner: &'a M) -> Self {
        Self { inner }
    }
}

impl<M: EpsModel + ?Sized> EpsModel for CfgTeacher<'_, M> {
    fn data_dim(&self) -> usize {
        self.inner.data_dim()
    }

    fn predict(&self, x: &Matrix, sigma: &[f64], cond: &[Cond], omega: &[f64]) -> Result<Matrix> {
        if omega.len() != x.rows() {
            return Err(Error::dim("cfg", format!("{} scales for {} rows", omega.len(), x.rows())));
        }
        let ec = self.inner.predict(x, sigma, cond, omega)?;
        let nulls = vec![Cond::Null; cond.len()];
        let eu = self.inner.predict(x, sigma, &nulls, omega)?;
        let mut out = Matrix::zeros(x.rows(), ec.cols());
        for r in 0..x.rows() {
            out.row_mut(r)
                .copy_from_slice(&cfg_combine(ec.row(r), eu.row(r), omega[r]));
        }
        Ok(out)
    }

    fn nfe(&self) -> u64 {
        self.inner.nfe()
    }
}

/// Exact ε from the dataset's smoothed score: `ε = −σ ∇log p_σ`.
pub struct AnalyticDenoiser<'a> {
    pub dataset: &'a ToyDataset,
    nfe: AtomicU64,
}

impl<'a> AnalyticDenoiser<'a> {
    pub fn new(dataset: &'a ToyDataset) -> Self {
        Self {
            dataset,
            nfe: AtomicU64::new(0),
        }
    }
}

impl EpsModel for AnalyticDenoiser<'_> {
    fn data_dim(&self) -> usize {
        self.dataset.dim()
    }

    fn predict(&self, x: &Matrix, sigma: &[f64], cond: &[Cond], _omega: &[f64]) -> Result<Matrix> {
        if sigma.len() != x.rows() || cond.len() != x.rows() || x.cols() != self.dataset.dim() {
            return Err(Error::dim("analytic_eps", "row or width mismatch"));
        }
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            self.dataset.check_cond(cond[r])?;
            let s = self.dataset.score(x.row(r), sigma[r], cond[r]);
            for (o, v) in out.row_mut(r).iter_mut().zip(s) {
                *o = -sigma[r] * v;
            }
        }
        self.nfe.fetch_add(x.rows() as u64, Ordering::Relaxed);
        Ok(out)
    }

    fn nfe(&self) -> u64 {
        self.nfe.load(Ordering::Relaxed)
    }
}

/// `x_t = x + σ ε` with `ε ~ N(0, I)` drawn from `seed`.
pub fn forward_perturb(x: &[f64], sigma: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng::stream(seed, &[tag::PAIR_DATA]);
    let eps: Vec<f64> = x.iter().map(|_| r.sample(StandardNormal)).collect();
    let xt = x.iter().zip(&eps).map(|(a, e)| a + sigma * e).collect();
    (xt, eps)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    DeterministicEuler,
    StochasticEm,
}

impl SamplerKind {
    pub fn code(self) -> u16 {
        match self {
            SamplerKind::DeterministicEuler => 0,
            SamplerKind::StochasticEm => 1,
        }
    }

    pub fn from_code(c: u16) -> Option<Self> {
        match c {
            0 => Some(SamplerKind::DeterministicEuler),
            1 => Some(SamplerKind::StochasticEm),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::DeterministicEuler => "deterministic_euler",
            SamplerKind::StochasticEm => "stochastic_em",
        }
    }
}

/// Batch state and ε used at one grid step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub sigma: f64,
    pub x: Matrix,
    pub eps: Matrix,
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub x0: Matrix,
    /// One entry per grid step when recording was requested.
    pub steps: Vec<StepRecord>,
    /// Rows whose state became non-finite; their outputs are meaningless.
    pub diverged: Vec<usize>,
    /// Step index and noise level of the first divergence.
    pub first_divergence: Option<(usize, f64)>,
    /// Network evaluations per sample.
    pub nfe_per_sample: u64,
}

/// Integrate from `σ_max` to 0 for a batch of independent seeds. Row `i`
/// draws its initial and SDE noise from `seeds[i]` only, so results do not
/// depend on batch composition.
pub fn sample_batch<M: EpsModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    kind: SamplerKind,
    cond: &[Cond],
    omega: &[f64],
    seeds: &[u64],
    record: bool,
) -> Result<SampleOutput> {
    schedule.validate()?;
    let n = seeds.len();
    if cond.len() != n || omega.len() != n {
        return Err(Error::dim(
            "sample",
            format!("{n} seeds, {} conditions, {} scales", cond.len(), omega.len()),
        ));
    }
    if let Some(w) = omega.iter().find(|w| !(w.is_finite() && **w >= 1.0)) {
        return Err(Error::Input(format!("guidance scale {w} must be >= 1")));
    }
    let d = model.data_dim();
    let grid = schedule.grid();
    let mut x = Matrix::zeros(n, d);
    for (i, &s) in seeds.iter().enumerate() {
        let mut r = rng::stream(s, &[tag::INIT_NOISE]);
        for v in x.row_mut(i) {
            *v = grid[0] * r.sample::<f64, _>(StandardNormal);
        }
    }
    let mut sde: Vec<Rng> = match kind {
        SamplerKind::StochasticEm => seeds
            .iter()
            .map(|&s| rng::stream(s, &[tag::SDE_NOISE]))
            .collect(),
        SamplerKind::DeterministicEuler => Vec::new(),
    };
    let mut alive: Vec<usize> = (0..n).collect();
    let mut diverged = Vec::new();
    let mut first_divergence = None;
    let mut steps = Vec::with_capacity(if record { grid.len() - 1 } else { 0 });
    let nfe0 = model.nfe();

    for i in 0..grid.len() - 1 {
        let (s, s_next) = (grid[i], grid[i + 1]);
        let sig = vec![s; n];
        let eps = if alive.len() == n {
            model.predict(&x, &sig, cond, omega)?
        } else {
            predict_subset(model, &x, s, cond, omega, &alive)?
        };
        if record {
            steps.push(StepRecord {
                sigma: s,
                x: x.clone(),
                eps: eps.clone(),
            });
        }
        for &r in &alive {
            let e = eps.row(r);
            match kind {
                SamplerKind::DeterministicEuler => {
                    let h = s_next - s;
                    for (xv, ev) in x.row_mut(r).iter_mut().zip(e) {
                        *xv += h * ev;
                    }
                }
                SamplerKind::StochasticEm => {
                    let dv = s * s - s_next * s_next;
                    let drift = dv / s;
                    let noise = dv.sqrt();
                    let z: Vec<f64> = (0..d).map(|_| sde[r].sample(StandardNormal)).collect();
                    for ((xv, ev), zv) in x.row_mut(r).iter_mut().zip(e).zip(z) {
                        *xv += -drift * ev + noise * zv;
                    }
                }
            }
        }
        let before = alive.len();
        alive.retain(|&r| {
            let ok = x.row(r).iter().all(|v| v.is_finite());
            if !ok {
                diverged.push(r);
                first_divergence.get_or_insert((i, s));
                log::warn!("sample row {r} diverged at step {i} (sigma {s})");
            }
            ok
        });
        if alive.len() != before {
            for &r in &diverged {
                x.row_mut(r).fill(0.0);
            }
        }
    }
    diverged.sort_unstable();
    let nfe_per_sample = if n == 0 { 0 } else { (model.nfe() - nfe0) / n as u64 };
    Ok(SampleOutput {
        x0: x,
        steps,
        diverged,
        first_divergence,
        nfe_per_sample,
    })
}

fn predict_subset<M: EpsModel + ?Sized>(
    model: &M,
    x: &Matrix,
    sigma: f64,
    cond: &[Cond],
    omega: &[f64],
    rows: &[usize],
) -> Result<Matrix> {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    if rows.is_empty() {
        return Ok(out);
    }
    let xs = x.gather_rows(rows)?;
    let cs: Vec<Cond> = rows.iter().map(|&r| cond[r]).collect();
    let ws: Vec<f64> = rows.iter().map(|&r| omega[r]).collect();
    let e = model.predict(&xs, &vec![sigma; rows.len()], &cs, &ws)?;
    for (k, &r) in rows.iter().enumerate() {
        out.row_mut(r).copy_from_slice(e.row(k));
    }
    Ok(out)
}

/// As [`sample_batch`] without recording; any divergence is an error.
pub fn sample<M: EpsModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    kind: SamplerKind,
    cond: &[Cond],
    omega: &[f64],
    seeds: &[u64],
) -> Result<Matrix> {
    let out = sample_batch(model, schedule, kind, cond, omega, seeds, false)?;
    if let Some((step, sigma)) = out.first_divergence {
        return Err(Error::Divergence { step, sigma });
    }
    Ok(out.x0)
}
