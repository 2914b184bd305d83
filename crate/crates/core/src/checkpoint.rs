//! Binary checkpoints: a container of tagged sections with an FNV-1a
//! trailer.
//!
//! ```text
//! "AGDK" | version u16 | section count u16
//! { tag [4] | payload length u64 | payload }*
//! fnv1a u64 over every preceding byte
//! ```
//!
//! Sections are `AGDB` (base model and schedule), `AGDA` (adapter stack)
//! and `AGDG` (fine-tuned baseline). A standalone adapter file (`.agda`)
//! holds only an `AGDA` section, so one base checkpoint composes with many
//! adapter files. All integers are little-endian.

use std::path::Path;

use crate::adapters::{AdapterSpec, AdapterStack, Architecture, Init};
use crate::diffusion::{Denoiser, DenoiserSpec, NoiseSchedule};
use crate::distill::{GdModel, OmegaPathway};
use crate::error::{Error, Result};
use crate::hash::fnv1a;
use crate::nn::{Matrix, ParamStore};

pub const MAGIC: &[u8; 4] = b"AGDK";
pub const VERSION: u16 = 1;
pub const TAG_BASE: &[u8; 4] = b"AGDB";
pub const TAG_ADAPTERS: &[u8; 4] = b"AGDA";
pub const TAG_GD: &[u8; 4] = b"AGDG";

const MAX_NAME: usize = 255;

#[derive(Clone, Debug)]
pub struct BaseSection {
    pub config_hash: u64,
    pub schedule: NoiseSchedule,
    pub model: Denoiser,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSection {
    pub config_hash: u64,
    /// Parameter hash of the base the adapters were trained on.
    pub base_hash: u64,
    pub spec: AdapterSpec,
    pub omega_frequencies: Matrix,
    pub positional_frequencies: Matrix,
    pub params: ParamStore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GdSection {
    pub config_hash: u64,
    pub base_hash: u64,
    pub omega_norm: f64,
    pub omega_frequencies: Matrix,
    pub pathway: ParamStore,
    pub model: ParamStore,
}

#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub base: Option<BaseSection>,
    pub adapters: Option<AdapterSection>,
    pub gd: Option<GdSection>,
}

impl AdapterSection {
    pub fn from_stack(stack: &AdapterStack, base: &Denoiser, config_hash: u64) -> Self {
        Self {
            config_hash,
            base_hash: base.param_hash(),
            spec: stack.spec().clone(),
            omega_frequencies: stack.encoder().omega_fourier.frequencies().clone(),
            positional_frequencies: stack.positional_frequencies(),
            params: stack.params().clone(),
        }
    }

    /// Attach to `base`, which must have the trunk shape the adapters were
    /// built for (not necessarily the same weights).
    pub fn into_stack(&self, base: &Denoiser) -> Result<AdapterStack> {
        let want = adapter_param_count(&self.spec, base, self.omega_frequencies.rows(), self.positional_frequencies.rows())?;
        if want != self.params.numel() as u128 {
            return Err(Error::Compatibility(format!(
                "adapter file has {} parameters; this spec on this base needs {want}",
                self.params.numel()
            )));
        }
        AdapterStack::from_parts(
            self.spec.clone(),
            base,
            self.omega_frequencies.clone(),
            self.positional_frequencies.clone(),
            &self.params,
        )
    }
}

impl GdSection {
    pub fn from_model(gd: &GdModel, base: &Denoiser, config_hash: u64) -> Self {
        Self {
            config_hash,
            base_hash: base.param_hash(),
            omega_norm: gd.pathway.norm,
            omega_frequencies: gd.pathway.fourier.frequencies().clone(),
            pathway: gd.pathway.params.clone(),
            model: gd.model.params().clone(),
        }
    }

    pub fn into_model(&self, base: &Denoiser) -> Result<GdModel> {
        if self.model.numel() != base.num_params() {
            return Err(Error::Compatibility("fine-tuned weights do not fit the base architecture".into()));
        }
        let e = base.embed_dim();
        let f = self.omega_frequencies.rows();
        if self.pathway.numel() as u128 != (2 * f as u128 + 1) * e as u128 {
            return Err(Error::Compatibility("ω pathway size does not match its frequencies".into()));
        }
        let pathway = OmegaPathway::from_parts(self.omega_frequencies.clone(), self.omega_norm, e, &self.pathway)?;
        let mut model = Denoiser::from_parts(base.spec().clone(), base.fourier().frequencies().clone(), &self.model)?;
        model.freeze();
        GdModel::new(&model, pathway)
    }
}

fn denoiser_param_count(s: &DenoiserSpec) -> u128 {
    let (d, k, w, depth, e, f) = (
        s.data_dim as u128,
        s.num_classes as u128,
        s.width as u128,
        s.depth as u128,
        s.embed_dim as u128,
        s.fourier_frequencies as u128,
    );
    let linear = |i: u128, o: u128| i * o + o;
    let trunk = if depth == 0 {
        0
    } else {
        linear(d + 2 * e, w) + (depth - 1) * linear(w, w)
    };
    linear(2 * f, e) + (k + 1) * e + trunk + linear(w, d)
}

fn adapter_param_count(spec: &AdapterSpec, base: &Denoiser, omega_f: usize, pos_f: usize) -> Result<u128> {
    if omega_f != spec.omega_frequencies || pos_f != spec.positional_frequencies {
        return Err(Error::Compatibility("stored frequency counts disagree with the adapter spec".into()));
    }
    if spec.tokens == 0 || base.width() % spec.tokens != 0 {
        return Err(Error::Compatibility(format!(
            "{} tokens do not divide the trunk width {}",
            spec.tokens,
            base.width()
        )));
    }
    let a = spec.hidden_dim as u128;
    let t = (base.width() / spec.tokens) as u128;
    let e = base.embed_dim() as u128;
    let linear = |i: u128, o: u128| i * o + o;
    let encoder = linear(2 * omega_f as u128, a) + linear(a, a) + 2 * linear(e, a);
    let per_layer = match spec.architecture {
        Architecture::CrossAttention => t * a + a * a + a * t,
        Architecture::Offset => linear(a, a) + linear(a, t),
        Architecture::Gating => (t + a) + 1 + linear(t + a, a) + linear(a, a) + a * t,
        Architecture::Positional => linear(2 * pos_f as u128 + a, a) + linear(a, t),
    };
    let layers = spec.layers.as_ref().map_or(base.spec().depth, Vec::len) as u128;
    Ok(encoder + layers * per_layer)
}

impl Checkpoint {
    pub fn base(model: &Denoiser, schedule: &NoiseSchedule, config_hash: u64) -> Self {
        Self {
            base: Some(BaseSection {
                config_hash,
                schedule: schedule.clone(),
                model: model.clone(),
            }),
            ..Self::default()
        }
    }

    pub fn adapters_only(section: AdapterSection) -> Self {
        Self {
            adapters: Some(section),
            ..Self::default()
        }
    }

    /// The base section, or a compatibility error naming what is missing.
    pub fn require_base(&self) -> Result<&BaseSection> {
        self.base
            .as_ref()
            .ok_or_else(|| Error::Compatibility("checkpoint has no base model section".into()))
    }

    /// Config hashes of every section present.
    pub fn config_hashes(&self) -> Vec<u64> {
        let mut v = Vec::new();
        v.extend(self.base.as_ref().map(|s| s.config_hash));
        v.extend(self.adapters.as_ref().map(|s| s.config_hash));
        v.extend(self.gd.as_ref().map(|s| s.config_hash));
        v
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut sections: Vec<(&[u8; 4], Vec<u8>)> = Vec::new();
        if let Some(b) = &self.base {
            let mut w = Writer::default();
            w.u64(b.config_hash);
            let s = &b.schedule;
            w.f64(s.sigma_min);
            w.f64(s.sigma_max);
            w.f64(s.rho);
            w.u32(s.num_steps as u32);
            let m = b.model.spec();
            for v in [m.data_dim, m.num_classes, m.width, m.depth, m.embed_dim, m.fourier_frequencies] {
                w.u32(v as u32);
            }
            w.f64(m.fourier_scale);
            w.f64(m.sigma_data);
            w.matrix(b.model.fourier().frequencies());
            w.store(b.model.params());
            sections.push((TAG_BASE, w.0));
        }
        if let Some(a) = &self.adapters {
            let mut w = Writer::default();
            w.u64(a.config_hash);
            w.u64(a.base_hash);
            let s = &a.spec;
            w.u16(s.architecture.code());
            w.u32(s.hidden_dim as u32);
            w.u16(match s.init {
                Init::Xavier => 0,
                Init::Zero => 1,
            });
            w.u32(s.tokens as u32);
            match &s.layers {
                None => w.u8(0),
                Some(l) => {
                    w.u8(1);
                    w.u32(l.len() as u32);
                    for &i in l {
                        w.u32(i as u32);
                    }
                }
            }
            w.f64(s.dropout);
            w.u32(s.omega_frequencies as u32);
            w.f64(s.omega_scale);
            w.f64(s.omega_norm);
            w.u32(s.positional_frequencies as u32);
            w.matrix(&a.omega_frequencies);
            w.matrix(&a.positional_frequencies);
            w.store(&a.params);
            sections.push((TAG_ADAPTERS, w.0));
        }
        if let Some(g) = &self.gd {
            let mut w = Writer::default();
            w.u64(g.config_hash);
            w.u64(g.base_hash);
            w.f64(g.omega_norm);
            w.matrix(&g.omega_frequencies);
            w.store(&g.pathway);
            w.store(&g.model);
            sections.push((TAG_GD, w.0));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(sections.len() as u16).to_le_bytes());
        for (tag, payload) in sections {
            out.extend_from_slice(tag);
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&payload);
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        if buf.len() < 16 {
            return Err(bad("file is too short"));
        }
        let (body, trailer) = buf.split_at(buf.len() - 8);
        if &body[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let stored = u64::from_le_bytes(trailer.try_into().expect("8 bytes"));
        if stored != fnv1a(body) {
            return Err(bad("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Compatibility(format!("checkpoint version {version}, expected {VERSION}")));
        }
        let count = r.u16()?;
        let mut ck = Checkpoint::default();
        for _ in 0..count {
            let tag: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
            let len = r.u64()?;
            let len = usize::try_from(len).ok().filter(|&l| l <= r.remaining()).ok_or_else(|| bad("section overruns the file"))?;
            let mut s = Reader {
                buf: r.take(len)?,
                pos: 0,
            };
            match &tag {
                t if t == TAG_BASE && ck.base.is_none() => ck.base = Some(decode_base(&mut s)?),
                t if t == TAG_ADAPTERS && ck.adapters.is_none() => ck.adapters = Some(decode_adapters(&mut s)?),
                t if t == TAG_GD && ck.gd.is_none() => ck.gd = Some(decode_gd(&mut s)?),
                _ => return Err(bad(format!("unexpected or repeated section {:?}", String::from_utf8_lossy(&tag)))),
            }
            if s.remaining() != 0 {
                return Err(bad("trailing bytes in section"));
            }
        }
        if r.remaining() != 0 {
            return Err(bad("trailing bytes after sections"));
        }
        Ok(ck)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&buf)
    }
}

fn decode_base(r: &mut Reader) -> Result<BaseSection> {
    let config_hash = r.u64()?;
    let schedule = NoiseSchedule {
        sigma_min: r.f64()?,
        sigma_max: r.f64()?,
        rho: r.f64()?,
        num_steps: r.u32()? as usize,
    };
    schedule.validate().map_err(|e| bad(e.to_string()))?;
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let spec = DenoiserSpec {
        data_dim: dims[0],
        num_classes: dims[1],
        width: dims[2],
        depth: dims[3],
        embed_dim: dims[4],
        fourier_frequencies: dims[5],
        fourier_scale: r.f64()?,
        sigma_data: r.f64()?,
    };
    spec.validate().map_err(|e| bad(e.to_string()))?;
    let freqs = r.matrix()?;
    let params = r.store()?;
    // every allocation below is then bounded by the file size
    if denoiser_param_count(&spec) != params.numel() as u128 {
        return Err(bad("parameter count does not match the architecture"));
    }
    let mut model = Denoiser::from_parts(spec, freqs, &params).map_err(|e| bad(e.to_string()))?;
    model.freeze();
    Ok(BaseSection {
        config_hash,
        schedule,
        model,
    })
}

fn decode_adapters(r: &mut Reader) -> Result<AdapterSection> {
    let config_hash = r.u64()?;
    let base_hash = r.u64()?;
    let architecture = Architecture::from_code(r.u16()?).ok_or_else(|| bad("unknown adapter architecture"))?;
    let hidden_dim = r.u32()? as usize;
    let init = match r.u16()? {
        0 => Init::Xavier,
        1 => Init::Zero,
        c => return Err(bad(format!("unknown init code {c}"))),
    };
    let tokens = r.u32()? as usize;
    let layers = match r.u8()? {
        0 => None,
        1 => {
            let n = r.u32()? as usize;
            if n > r.remaining() / 4 {
                return Err(bad("layer list overruns the section"));
            }
            Some((0..n).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?)
        }
        _ => return Err(bad("bad layer-list flag")),
    };
    let spec = AdapterSpec {
        architecture,
        hidden_dim,
        init,
        tokens,
        layers,
        dropout: r.f64()?,
        omega_frequencies: r.u32()? as usize,
        omega_scale: r.f64()?,
        omega_norm: r.f64()?,
        positional_frequencies: r.u32()? as usize,
    };
    Ok(AdapterSection {
        config_hash,
        base_hash,
        spec,
        omega_frequencies: r.matrix()?,
        positional_frequencies: r.matrix()?,
        params: r.store()?,
    })
}

fn decode_gd(r: &mut Reader) -> Result<GdSection> {
    Ok(GdSection {
        config_hash: r.u64()?,
        base_hash: r.u64()?,
        omega_norm: r.f64()?,
        omega_frequencies: r.matrix()?,
        pathway: r.store()?,
        model: r.store()?,
    })
}

fn bad(detail: impl Into<String>) -> Error {
    Error::format("checkpoint", detail)
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn matrix(&mut self, m: &Matrix) {
        self.u32(m.rows() as u32);
        self.u32(m.cols() as u32);
        for &v in m.as_slice() {
            self.f64(v);
        }
    }

    fn store(&mut self, s: &ParamStore) {
        self.u32(s.len() as u32);
        for (name, m) in s.iter() {
            self.u16(name.len() as u16);
            self.0.extend_from_slice(name.as_bytes());
            self.matrix(m);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(bad("unexpected end of data"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let n = rows
            .checked_mul(cols)
            .filter(|&n| n <= self.remaining() / 8)
            .ok_or_else(|| bad(format!("{rows}x{cols} matrix overruns the data")))?;
        let data = self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect::<Vec<_>>();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite parameter"));
        }
        Matrix::from_vec(rows, cols, data)
    }

    fn store(&mut self) -> Result<ParamStore> {
        let n = self.u32()? as usize;
        // each entry takes at least 10 bytes
        if n > self.remaining() / 10 {
            return Err(bad("parameter table overruns the data"));
        }
        let mut s = ParamStore::new();
        for _ in 0..n {
            let len = self.u16()? as usize;
            if len > MAX_NAME {
                return Err(bad("parameter name too long"));
            }
            let name = std::str::from_utf8(self.take(len)?).map_err(|_| bad("parameter name is not UTF-8"))?;
            let m = self.matrix()?;
            s.add(name, m);
        }
        Ok(s)
    }
}
