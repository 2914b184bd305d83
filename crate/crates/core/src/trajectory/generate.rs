use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::store::{StoreHeader, TrajectoryRecord, TrajectorySource, TrajectoryStore};
use crate::diffusion::{forward_perturb, sample_batch, CfgTeacher, Cond, Denoiser, NoiseSchedule, SamplerKind, ToyDataset};
use crate::error::{Error, Result};
use crate::eval::energy_distance;
use crate::nn::Matrix;
use crate::rng::{self, tag};

/// Rows per teacher call during generation.
const CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectorySpec {
    pub count: usize,
    /// Assign classes round-robin instead of drawing them.
    pub stratified: bool,
    pub omega_range: [f64; 2],
    pub sampler: SamplerKind,
    pub source: TrajectorySource,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            count: 512,
            stratified: true,
            omega_range: [1.0, 6.0],
            sampler: SamplerKind::DeterministicEuler,
            source: TrajectorySource::Guided,
        }
    }
}

impl TrajectorySpec {
    fn validate(&self) -> Result<()> {
        let [lo, hi] = self.omega_range;
        if !(lo.is_finite() && hi.is_finite() && lo >= 1.0 && lo <= hi) {
            return Err(Error::Config(format!("omega range [{lo}, {hi}] needs 1 <= lo <= hi")));
        }
        Ok(())
    }

    /// Class and guidance scale of trajectory `t`. Both depend only on
    /// `(seed, t)`, and ω is an affine image of the same uniform draw for
    /// every range.
    fn meta(&self, t: usize, num_classes: usize, seed: u64) -> (Cond, f64) {
        let mut r = rng::stream(seed, &[tag::TRAJ_META, t as u64]);
        let u: f64 = r.random();
        let drawn = r.random_range(0..num_classes);
        let class = if self.stratified { t % num_classes } else { drawn };
        let [lo, hi] = self.omega_range;
        (Cond::Class(class), lo + (hi - lo) * u)
    }
}

/// Seed of the starting noise of trajectory `t`.
pub fn trajectory_seed(seed: u64, t: usize) -> u64 {
    rng::derive(seed, &[tag::INIT_NOISE, t as u64])
}

fn check_teacher(teacher: &Denoiser, schedule: &NoiseSchedule) -> Result<()> {
    if !teacher.is_frozen() {
        return Err(Error::Precondition("teacher must be frozen".into()));
    }
    schedule.validate()
}

fn header(
    teacher: &Denoiser,
    schedule: &NoiseSchedule,
    spec: &TrajectorySpec,
    source: TrajectorySource,
    trajectories: u64,
    config_hash: u64,
) -> StoreHeader {
    StoreHeader {
        source,
        data_dim: teacher.data_dim() as u32,
        num_steps: schedule.num_steps as u32,
        num_trajectories: trajectories,
        omega_lo: spec.omega_range[0],
        omega_hi: spec.omega_range[1],
        sampler: spec.sampler,
        schedule_hash: schedule.hash(),
        teacher_hash: teacher.param_hash(),
        config_hash,
        record_count: trajectories * schedule.num_steps as u64,
    }
}

/// Run the CFG teacher from pure noise and cache every step's state and
/// combined ε. Trajectories that diverge are skipped.
pub fn generate_guided_trajectories(
    teacher: &Denoiser,
    schedule: &NoiseSchedule,
    spec: &TrajectorySpec,
    seed: u64,
    config_hash: u64,
) -> Result<TrajectoryStore> {
    spec.validate()?;
    check_teacher(teacher, schedule)?;
    let total = spec.count;
    let cfg = CfgTeacher::new(teacher);
    let mut records = Vec::with_capacity(total * schedule.num_steps);
    let mut kept = 0u64;
    for start in (0..total).step_by(CHUNK) {
        let ids: Vec<usize> = (start..total.min(start + CHUNK)).collect();
        let (cond, omega): (Vec<Cond>, Vec<f64>) = ids
            .iter()
            .map(|&t| spec.meta(t, teacher.num_classes(), seed))
            .unzip();
        let seeds: Vec<u64> = ids.iter().map(|&t| trajectory_seed(seed, t)).collect();
        let out = sample_batch(&cfg, schedule, spec.sampler, &cond, &omega, &seeds, true)?;
        for (row, &t) in ids.iter().enumerate() {
            if out.diverged.contains(&row) {
                log::warn!("trajectory {t} diverged; skipped");
                continue;
            }
            kept += 1;
            for (i, st) in out.steps.iter().enumerate() {
                records.push(TrajectoryRecord {
                    trajectory_id: t as u64,
                    step_index: i as u32,
                    cond: cond[row],
                    omega: omega[row],
                    sigma: st.sigma,
                    x_t: st.x.row(row).to_vec(),
                    eps_target: st.eps.row(row).to_vec(),
                });
            }
        }
    }
    Ok(TrajectoryStore {
        header: header(teacher, schedule, spec, TrajectorySource::Guided, kept, config_hash),
        records,
    })
}

/// Forward-noised data at every grid level, with the CFG teacher's combined
/// ε as target. Same record layout and count as the guided store.
pub fn generate_diffusion_pairs(
    teacher: &Denoiser,
    dataset: &ToyDataset,
    schedule: &NoiseSchedule,
    spec: &TrajectorySpec,
    seed: u64,
    config_hash: u64,
) -> Result<TrajectoryStore> {
    spec.validate()?;
    check_teacher(teacher, schedule)?;
    if dataset.dim() != teacher.data_dim() || dataset.num_classes() != teacher.num_classes() {
        return Err(Error::Compatibility("dataset does not match the teacher".into()));
    }
    let total = spec.count;
    let grid = schedule.grid();
    let n = schedule.num_steps;
    let mut records = Vec::with_capacity(total * n);
    for t in 0..total {
        let (cond, omega) = spec.meta(t, teacher.num_classes(), seed);
        let class = cond.class().expect("trajectories are class-conditional");
        let mut r = rng::stream(seed, &[tag::PAIR_DATA, t as u64]);
        for (i, &sigma) in grid[..n].iter().enumerate() {
            let x = dataset.sample(class, &mut r);
            let (x_t, _) = forward_perturb(&x, sigma, r.random());
            records.push(TrajectoryRecord {
                trajectory_id: t as u64,
                step_index: i as u32,
                cond,
                omega,
                sigma,
                x_t,
                eps_target: Vec::new(),
            });
        }
    }
    let cfg = CfgTeacher::new(teacher);
    for chunk in records.chunks_mut(CHUNK) {
        let x = Matrix::from_rows(&chunk.iter().map(|r| r.x_t.clone()).collect::<Vec<_>>())?;
        let sigma: Vec<f64> = chunk.iter().map(|r| r.sigma).collect();
        let cond: Vec<Cond> = chunk.iter().map(|r| r.cond).collect();
        let omega: Vec<f64> = chunk.iter().map(|r| r.omega).collect();
        let eps = crate::diffusion::EpsModel::predict(&cfg, &x, &sigma, &cond, &omega)?;
        for (k, rec) in chunk.iter_mut().enumerate() {
            rec.eps_target = eps.row(k).to_vec();
        }
    }
    Ok(TrajectoryStore {
        header: header(teacher, schedule, spec, TrajectorySource::Diffusion, total as u64, config_hash),
        records,
    })
}

/// Per-step energy distance between the `x_t` marginals of two stores.
pub fn trajectory_divergence(a: &TrajectoryStore, b: &TrajectoryStore) -> Result<Vec<f64>> {
    if a.header.schedule_hash != b.header.schedule_hash || a.header.num_steps != b.header.num_steps {
        return Err(Error::Compatibility("stores were generated on different schedules".into()));
    }
    if a.header.data_dim != b.header.data_dim {
        return Err(Error::Compatibility("stores differ in data_dim".into()));
    }
    let steps = a.header.num_steps as usize;
    let by_step = |s: &TrajectoryStore| -> Result<Vec<Matrix>> {
        let mut rows: Vec<Vec<Vec<f64>>> = vec![Vec::new(); steps];
        for r in &s.records {
            rows[r.step_index as usize].push(r.x_t.clone());
        }
        rows.iter().map(|r| Matrix::from_rows(r)).collect()
    };
    let (ma, mb) = (by_step(a)?, by_step(b)?);
    ma.iter().zip(&mb).map(|(x, y)| energy_distance(x, y)).collect()
}
