use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::dataset::Cond;
use crate::error::{Error, Result};
use crate::nn::{xavier, Activation, Bound, FourierEncoder, Linear, Matrix, ParamId, ParamStore, Tape, Var};
use crate::rng::{self, tag};

/// Architecture of the base ε-prediction network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserSpec {
    pub data_dim: usize,
    pub num_classes: usize,
    pub width: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub fourier_frequencies: usize,
    pub fourier_scale: f64,
    /// Input scaling `x / sqrt(σ² + sigma_data²)`.
    pub sigma_data: f64,
}

impl Default for DenoiserSpec {
    fn default() -> Self {
        Self {
            data_dim: 2,
            num_classes: 8,
            width: 128,
            depth: 3,
            embed_dim: 32,
            fourier_frequencies: 16,
            fourier_scale: 1.0,
            sigma_data: 1.5,
        }
    }
}

impl DenoiserSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.data_dim > 0
            && self.num_classes > 0
            && self.width > 0
            && self.depth > 0
            && self.embed_dim > 0
            && self.fourier_frequencies > 0
            && self.fourier_scale > 0.0
            && self.sigma_data > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid denoiser spec {self:?}")))
        }
    }
}

/// Extension points inside the trunk. Default methods are the identity.
pub trait TrunkHook {
    /// Called once with the noise-level and class embeddings; returns the
    /// noise-level embedding fed to the trunk.
    fn on_embeddings(&mut self, _tape: &mut Tape, temb: Var, _cemb: Var) -> Result<Var> {
        Ok(temb)
    }

    /// Called after hidden layer `layer` with its activations `B x width`.
    fn on_hidden(&mut self, _tape: &mut Tape, _layer: usize, h: Var) -> Result<Var> {
        Ok(h)
    }
}

pub struct NoHook;

impl TrunkHook for NoHook {}

/// Conditional ε-predictor `ε_θ(x_t, σ, c)` with a learned null-class row.
#[derive(Debug)]
pub struct Denoiser {
    spec: DenoiserSpec,
    fourier: FourierEncoder,
    params: ParamStore,
    t_embed: Linear,
    class_table: ParamId,
    hidden: Vec<Linear>,
    out: Linear,
    frozen: bool,
    nfe: AtomicU64,
}

impl Clone for Denoiser {
    /// Clones parameters and flags; the clone starts with a zero NFE counter.
    fn clone(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            fourier: self.fourier.clone(),
            params: self.params.clone(),
            t_embed: self.t_embed,
            class_table: self.class_table,
            hidden: self.hidden.clone(),
            out: self.out,
            frozen: self.frozen,
            nfe: AtomicU64::new(0),
        }
    }
}

impl Denoiser {
    pub fn new(spec: DenoiserSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut r = rng::stream(seed, &[tag::INIT_PARAMS]);
        let fourier = FourierEncoder::new(1, spec.fourier_frequencies, spec.fourier_scale, seed);
        let mut params = ParamStore::new();
        let e = spec.embed_dim;
        let t_embed = Linear::new(&mut params, "t_embed", fourier.output_dim(), e, &mut r);
        let class_table = params.add("class_table", xavier(spec.num_classes + 1, e, &mut r));
        let mut hidden = Vec::with_capacity(spec.depth);
        let mut in_dim = spec.data_dim + 2 * e;
        for i in 0..spec.depth {
            hidden.push(Linear::new(&mut params, &format!("trunk.{i}"), in_dim, spec.width, &mut r));
            in_dim = spec.width;
        }
        let out = Linear::new(&mut params, "out", spec.width, spec.data_dim, &mut r);
        Ok(Self {
            spec,
            fourier,
            params,
            t_embed,
            class_table,
            hidden,
            out,
            frozen: false,
            nfe: AtomicU64::new(0),
        })
    }

    /// Rebuild from stored frequencies and parameters; names and shapes must
    /// match the layout implied by `spec`.
    pub fn from_parts(spec: DenoiserSpec, freqs: Matrix, params: &ParamStore) -> Result<Self> {
        let mut d = Self::new(spec, 0)?;
        if freqs.shape() != d.fourier.frequencies().shape() {
            return Err(Error::Compatibility(format!(
                "fourier frequencies {:?} vs {:?}",
                freqs.shape(),
                d.fourier.frequencies().shape()
            )));
        }
        d.fourier = FourierEncoder::from_frequencies(freqs);
        d.params.load(params)?;
        Ok(d)
    }

    pub fn spec(&self) -> &DenoiserSpec {
        &self.spec
    }

    pub fn fourier(&self) -> &FourierEncoder {
        &self.fourier
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> Result<&mut ParamStore> {
        if self.frozen {
            return Err(Error::Precondition("denoiser parameters are frozen".into()));
        }
        Ok(&mut self.params)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Hash over parameters and Fourier frequencies.
    pub fn param_hash(&self) -> u64 {
        crate::hash::Fnv::new()
            .u64(self.params.hash())
            .f64s(self.fourier.frequencies().as_slice())
            .finish()
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    /// Rows evaluated since construction (one per sample per forward pass).
    pub fn nfe(&self) -> u64 {
        self.nfe.load(Ordering::Relaxed)
    }

    pub fn data_dim(&self) -> usize {
        self.spec.data_dim
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn width(&self) -> usize {
        self.spec.width
    }

    pub fn embed_dim(&self) -> usize {
        self.spec.embed_dim
    }

    fn class_index(&self, c: Cond) -> Result<usize> {
        match c {
            Cond::Null => Ok(self.spec.num_classes),
            Cond::Class(k) if k < self.spec.num_classes => Ok(k),
            Cond::Class(k) => Err(Error::Input(format!("unknown class {k}"))),
        }
    }

    fn check_batch(&self, rows: usize, cols: usize, sigma: &[f64], cond: &[Cond]) -> Result<Vec<usize>> {
        if cols != self.spec.data_dim || sigma.len() != rows || cond.len() != rows {
            return Err(Error::dim(
                "denoiser_forward",
                format!(
                    "x {rows}x{cols}, {} sigmas, {} conditions, data_dim {}",
                    sigma.len(),
                    cond.len(),
                    self.spec.data_dim
                ),
            ));
        }
        if let Some(s) = sigma.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Input(format!("noise level {s} must be positive")));
        }
        cond.iter().map(|&c| self.class_index(c)).collect()
    }

    /// Noise-level embedding `silu(Linear(Fourier(ln σ / 4)))` and class
    /// embedding rows, each `B x embed_dim`. Not counted as a forward pass.
    pub fn embed(&self, tape: &mut Tape, p: &Bound, sigma: &[f64], cond: &[Cond]) -> Result<(Var, Var)> {
        let idx = self.check_batch(sigma.len(), self.spec.data_dim, sigma, cond)?;
        self.embed_checked(tape, p, sigma, &idx)
    }

    fn embed_checked(&self, tape: &mut Tape, p: &Bound, sigma: &[f64], idx: &[usize]) -> Result<(Var, Var)> {
        let c_noise: Vec<f64> = sigma.iter().map(|s| s.ln() / 4.0).collect();
        let feats = tape.constant(self.fourier.encode_scalars(&c_noise)?);
        let temb = self.t_embed.forward(tape, p, feats)?;
        let temb = tape.act(temb, Activation::Silu);
        let cemb = tape.gather_rows(p.var(self.class_table), idx)?;
        Ok((temb, cemb))
    }

    /// Build the forward pass on `tape`. `p` must be bound from
    /// [`Denoiser::params`].
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        sigma: &[f64],
        cond: &[Cond],
        hook: &mut dyn TrunkHook,
    ) -> Result<Var> {
        let (rows, cols) = tape.shape(x);
        let idx = self.check_batch(rows, cols, sigma, cond)?;
        self.nfe.fetch_add(rows as u64, Ordering::Relaxed);

        let (temb, cemb) = self.embed_checked(tape, p, sigma, &idx)?;
        let temb = hook.on_embeddings(tape, temb, cemb)?;

        let sd2 = self.spec.sigma_data * self.spec.sigma_data;
        let c_in: Vec<f64> = sigma.iter().map(|s| 1.0 / (s * s + sd2).sqrt()).collect();
        let c_in = tape.constant(Matrix::column(&c_in));
        let x_in = tape.scale_rows(c_in, x)?;

        let mut h = tape.concat_cols(&[x_in, temb, cemb])?;
        for (i, layer) in self.hidden.iter().enumerate() {
            h = layer.forward(tape, p, h)?;
            h = tape.act(h, Activation::Silu);
            h = hook.on_hidden(tape, i, h)?;
        }
        self.out.forward(tape, p, h)
    }

    /// Inference-only conditional prediction.
    pub fn eps(&self, x: &Matrix, sigma: &[f64], cond: &[Cond]) -> Result<Matrix> {
        self.eps_with_hook(x, sigma, cond, &mut NoHook)
    }

    pub fn eps_with_hook(
        &self,
        x: &Matrix,
        sigma: &[f64],
        cond: &[Cond],
        hook: &mut dyn TrunkHook,
    ) -> Result<Matrix> {
        let mut tape = Tape::new();
        let p = tape.bind(&self.params, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &p, xv, sigma, cond, hook)?;
        let m = tape.value(out);
        if !m.is_finite() {
            return Err(Error::Numeric("denoiser output".into()));
        }
        Ok(m.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DenoiserSpec {
        DenoiserSpec {
            width: 16,
            depth: 2,
            embed_dim: 8,
            fourier_frequencies: 4,
            num_classes: 3,
            ..DenoiserSpec::default()
        }
    }

    #[test]
    fn output_shape_and_nfe() {
        let d = Denoiser::new(small(), 1).unwrap();
        let x = Matrix::from_rows(&[vec![0.1, 0.2], vec![-1.0, 0.5], vec![3.0, 0.0]]).unwrap();
        let e = d
            .eps(&x, &[1.0, 0.5, 2.0], &[Cond::Class(0), Cond::Null, Cond::Class(2)])
            .unwrap();
        assert_eq!(e.shape(), (3, 2));
        assert_eq!(d.nfe(), 3);
        assert_eq!(d.clone().nfe(), 0);
    }

    #[test]
    fn rows_are_independent_of_batch() {
        let d = Denoiser::new(small(), 2).unwrap();
        let x = Matrix::from_rows(&[vec![0.1, 0.2], vec![-1.0, 0.5]]).unwrap();
        let both = d.eps(&x, &[1.0, 0.3], &[Cond::Class(1), Cond::Null]).unwrap();
        let one = d
            .eps(&Matrix::row_vector(&[-1.0, 0.5]), &[0.3], &[Cond::Null])
            .unwrap();
        assert_eq!(both.row(1), one.row(0));
    }

    #[test]
    fn rejects_bad_inputs() {
        let d = Denoiser::new(small(), 3).unwrap();
        let x = Matrix::row_vector(&[0.0, 0.0]);
        assert!(matches!(d.eps(&x, &[1.0], &[Cond::Class(3)]), Err(Error::Input(_))));
        assert!(matches!(d.eps(&x, &[0.0], &[Cond::Null]), Err(Error::Input(_))));
        assert!(matches!(d.eps(&x, &[1.0, 1.0], &[Cond::Null]), Err(Error::Dimension { .. })));
        assert_eq!(d.nfe(), 0);
    }

    #[test]
    fn frozen_blocks_mutation() {
        let mut d = Denoiser::new(small(), 4).unwrap();
        d.freeze();
        assert!(d.params_mut().is_err());
        d.unfreeze();
        assert!(d.params_mut().is_ok());
    }

    #[test]
    fn from_parts_round_trip() {
        let d = Denoiser::new(small(), 5).unwrap();
        let e = Denoiser::from_parts(small(), d.fourier().frequencies().clone(), d.params()).unwrap();
        assert_eq!(d.param_hash(), e.param_hash());
        let wide = DenoiserSpec { width: 17, ..small() };
        assert!(matches!(
            Denoiser::from_parts(wide, d.fourier().frequencies().clone(), d.params()),
            Err(Error::Compatibility(_))
        ));
    }
}
