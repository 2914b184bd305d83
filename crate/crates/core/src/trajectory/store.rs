use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffusion::{Cond, NoiseSchedule, SamplerKind};
use crate::error::{Error, Result};
use crate::hash::fnv1a;
use crate::rng;

pub const MAGIC: &[u8; 4] = b"AGDT";
pub const VERSION: u16 = 1;

/// Bytes before the first record.
pub const HEADER_LEN: usize = 4 + 2 + 2 + 4 + 4 + 8 + 8 + 8 + 2 + 8 + 8 + 8 + 8;

const MAX_DATA_DIM: u32 = 1 << 12;

/// Cached distillation target.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub trajectory_id: u64,
    pub step_index: u32,
    pub cond: Cond,
    pub omega: f64,
    pub sigma: f64,
    pub x_t: Vec<f64>,
    pub eps_target: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectorySource {
    /// States visited by CFG-guided sampling.
    Guided,
    /// Forward-noised data points at grid noise levels.
    Diffusion,
}

impl TrajectorySource {
    pub fn code(self) -> u16 {
        match self {
            TrajectorySource::Guided => 0,
            TrajectorySource::Diffusion => 1,
        }
    }

    pub fn from_code(c: u16) -> Option<Self> {
        match c {
            0 => Some(TrajectorySource::Guided),
            1 => Some(TrajectorySource::Diffusion),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TrajectorySource::Guided => "guided",
            TrajectorySource::Diffusion => "diffusion",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoreHeader {
    pub source: TrajectorySource,
    pub data_dim: u32,
    pub num_steps: u32,
    pub num_trajectories: u64,
    pub omega_lo: f64,
    pub omega_hi: f64,
    pub sampler: SamplerKind,
    pub schedule_hash: u64,
    pub teacher_hash: u64,
    pub config_hash: u64,
    pub record_count: u64,
}

impl StoreHeader {
    fn record_len(&self) -> usize {
        record_len(self.data_dim as usize)
    }
}

fn record_len(d: usize) -> usize {
    8 + 4 + 4 + 8 + 8 + 16 * d
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryStore {
    pub header: StoreHeader,
    pub records: Vec<TrajectoryRecord>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let mut out = [0u8; N];
        out.copy_from_slice(&self.buf[self.pos..self.pos + N]);
        self.pos += N;
        out
    }

    fn u16(&mut self) -> u16 {
        u16::from_le_bytes(self.take())
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }

    fn i32(&mut self) -> i32 {
        i32::from_le_bytes(self.take())
    }

    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take())
    }

    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take())
    }
}

fn bad(detail: impl Into<String>) -> Error {
    Error::format("trajectory store", detail)
}

impl TrajectoryStore {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(HEADER_LEN + self.records.len() * h.record_len() + 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&h.source.code().to_le_bytes());
        out.extend_from_slice(&h.data_dim.to_le_bytes());
        out.extend_from_slice(&h.num_steps.to_le_bytes());
        out.extend_from_slice(&h.num_trajectories.to_le_bytes());
        out.extend_from_slice(&h.omega_lo.to_le_bytes());
        out.extend_from_slice(&h.omega_hi.to_le_bytes());
        out.extend_from_slice(&h.sampler.code().to_le_bytes());
        out.extend_from_slice(&h.schedule_hash.to_le_bytes());
        out.extend_from_slice(&h.teacher_hash.to_le_bytes());
        out.extend_from_slice(&h.config_hash.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&r.trajectory_id.to_le_bytes());
            out.extend_from_slice(&r.step_index.to_le_bytes());
            out.extend_from_slice(&(r.cond.to_i64() as i32).to_le_bytes());
            out.extend_from_slice(&r.omega.to_le_bytes());
            out.extend_from_slice(&r.sigma.to_le_bytes());
            for v in r.x_t.iter().chain(&r.eps_target) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    /// Parse and validate; sizes are checked before any allocation that
    /// depends on header fields.
    pub fn decode(buf: &[u8]) -> Result<Self> {
        if buf.len() < HEADER_LEN + 8 {
            return Err(bad(format!("{} bytes is shorter than the header", buf.len())));
        }
        let (body, trailer) = buf.split_at(buf.len() - 8);
        let sum = u64::from_le_bytes(trailer.try_into().expect("8 bytes"));
        if fnv1a(body) != sum {
            return Err(bad("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if &r.take::<4>() != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u16();
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let source = TrajectorySource::from_code(r.u16()).ok_or_else(|| bad("unknown source"))?;
        let data_dim = r.u32();
        let num_steps = r.u32();
        let num_trajectories = r.u64();
        let omega_lo = r.f64();
        let omega_hi = r.f64();
        let sampler = SamplerKind::from_code(r.u16()).ok_or_else(|| bad("unknown sampler"))?;
        let header = StoreHeader {
            source,
            data_dim,
            num_steps,
            num_trajectories,
            omega_lo,
            omega_hi,
            sampler,
            schedule_hash: r.u64(),
            teacher_hash: r.u64(),
            config_hash: r.u64(),
            record_count: r.u64(),
        };
        if data_dim == 0 || data_dim > MAX_DATA_DIM {
            return Err(bad(format!("data_dim {data_dim}")));
        }
        if !(omega_lo.is_finite() && omega_hi.is_finite() && omega_lo <= omega_hi) {
            return Err(bad(format!("omega range [{omega_lo}, {omega_hi}]")));
        }
        if num_trajectories.checked_mul(num_steps as u64) != Some(header.record_count) {
            return Err(bad(format!(
                "{} records for {num_trajectories} trajectories x {num_steps} steps",
                header.record_count
            )));
        }
        let payload = (body.len() - HEADER_LEN) as u64;
        let rl = header.record_len() as u64;
        if header.record_count.checked_mul(rl) != Some(payload) {
            return Err(bad(format!(
                "{payload} payload bytes for {} records of {rl}",
                header.record_count
            )));
        }
        let d = data_dim as usize;
        let mut records = Vec::with_capacity(header.record_count as usize);
        for _ in 0..header.record_count {
            let trajectory_id = r.u64();
            let step_index = r.u32();
            let cls = r.i32();
            let cond = Cond::from_i64(cls as i64).ok_or_else(|| bad(format!("class tag {cls}")))?;
            let omega = r.f64();
            let sigma = r.f64();
            let x_t: Vec<f64> = (0..d).map(|_| r.f64()).collect();
            let eps_target: Vec<f64> = (0..d).map(|_| r.f64()).collect();
            if step_index >= num_steps {
                return Err(bad(format!("step {step_index} outside {num_steps}")));
            }
            let finite = omega.is_finite()
                && sigma.is_finite()
                && sigma > 0.0
                && x_t.iter().chain(&eps_target).all(|v| v.is_finite());
            if !finite {
                return Err(bad(format!("non-finite record in trajectory {trajectory_id}")));
            }
            records.push(TrajectoryRecord {
                trajectory_id,
                step_index,
                cond,
                omega,
                sigma,
                x_t,
                eps_target,
            });
        }
        Ok(Self { header, records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&buf)
    }

    /// Checksum of the encoded file.
    pub fn checksum(&self) -> u64 {
        let b = self.encode();
        u64::from_le_bytes(b[b.len() - 8..].try_into().expect("8 bytes"))
    }

    /// Guard against grid drift: the store's schedule hash must match and
    /// every record's σ must equal the grid value at its step.
    pub fn check_schedule(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.header.schedule_hash != schedule.hash() || self.header.num_steps as usize != schedule.num_steps {
            return Err(Error::Compatibility(format!(
                "store schedule hash {:016x} ({} steps) vs {:016x} ({} steps)",
                self.header.schedule_hash,
                self.header.num_steps,
                schedule.hash(),
                schedule.num_steps
            )));
        }
        let grid = schedule.grid();
        if let Some(r) = self.records.iter().find(|r| r.sigma != grid[r.step_index as usize]) {
            return Err(Error::Compatibility(format!(
                "record sigma {} off grid at step {}",
                r.sigma, r.step_index
            )));
        }
        Ok(())
    }

    /// Records of trajectories with `id % 10 != 9` and `id % 10 == 9`.
    pub fn split_held_out(&self) -> (Vec<&TrajectoryRecord>, Vec<&TrajectoryRecord>) {
        self.records.iter().partition(|r| !is_held_out(r.trajectory_id))
    }

    pub fn info(&self) -> String {
        let h = &self.header;
        format!(
            "format: AGDT v{VERSION}\n\
             source: {}\n\
             sampler: {}\n\
             data_dim: {}\n\
             steps: {}\n\
             trajectories: {}\n\
             records: {}\n\
             omega_range: [{}, {}]\n\
             schedule_hash: {:016x}\n\
             teacher_hash: {:016x}\n\
             config_hash: {:016x}\n\
             checksum: {:016x}\n",
            h.source.name(),
            h.sampler.name(),
            h.data_dim,
            h.num_steps,
            h.num_trajectories,
            h.record_count,
            h.omega_lo,
            h.omega_hi,
            h.schedule_hash,
            h.teacher_hash,
            h.config_hash,
            self.checksum()
        )
    }
}

pub fn is_held_out(trajectory_id: u64) -> bool {
    trajectory_id % 10 == 9
}

/// `batch` i.i.d. uniform draws with replacement.
pub fn sample_minibatch<'a, R: std::borrow::Borrow<TrajectoryRecord>>(
    records: &'a [R],
    batch: usize,
    seed: u64,
) -> Result<Vec<&'a TrajectoryRecord>> {
    if records.is_empty() {
        return Err(Error::Precondition("cannot draw from an empty store".into()));
    }
    let mut r = rng::stream(seed, &[rng::tag::BATCH]);
    Ok((0..batch)
        .map(|_| records[r.random_range(0..records.len())].borrow())
        .collect())
}
