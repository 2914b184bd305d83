use crate::adapters::Init;
use crate::diffusion::{Cond, Denoiser, EpsModel, TrunkHook};
use crate::error::{Error, Result};
use crate::nn::{Bound, FourierEncoder, Linear, Matrix, ParamStore, Tape, Var};
use crate::rng::{self, tag};

/// Extra guidance-scale embedding added to the noise-level embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct OmegaPathway {
    pub fourier: FourierEncoder,
    pub norm: f64,
    pub proj: Linear,
    pub params: ParamStore,
}

impl OmegaPathway {
    pub fn new(frequencies: usize, scale: f64, norm: f64, embed_dim: usize, init: Init, seed: u64) -> Result<Self> {
        if frequencies == 0 || !(scale > 0.0) || !(norm > 0.0) {
            return Err(Error::Config(format!(
                "ω pathway needs positive frequencies/scale/norm, got {frequencies}/{scale}/{norm}"
            )));
        }
        let fourier = FourierEncoder::new(1, frequencies, scale, rng::derive(seed, &[0x6d, 1]));
        let mut params = ParamStore::new();
        let mut r = rng::stream(seed, &[tag::INIT_PARAMS, 0x6d]);
        let proj = Linear::new(&mut params, "omega.proj", fourier.output_dim(), embed_dim, &mut r);
        if init == Init::Zero {
            proj.zero_out(&mut params);
        }
        Ok(Self {
            fourier,
            norm,
            proj,
            params,
        })
    }

    /// Rebuild from stored frequencies and parameters.
    pub fn from_parts(freqs: Matrix, norm: f64, embed_dim: usize, params: &ParamStore) -> Result<Self> {
        let mut p = Self::new(freqs.rows().max(1), 1.0, norm, embed_dim, Init::Zero, 0)?;
        if freqs.cols() != 1 {
            return Err(Error::Compatibility("ω pathway frequencies must be one column".into()));
        }
        p.fourier = FourierEncoder::from_frequencies(freqs);
        p.params.load(params)?;
        Ok(p)
    }
}

struct OmegaHook<'a> {
    pathway: &'a OmegaPathway,
    p: &'a Bound,
    omega: &'a [f64],
}

impl TrunkHook for OmegaHook<'_> {
    fn on_embeddings(&mut self, tape: &mut Tape, temb: Var, _cemb: Var) -> Result<Var> {
        if let Some(w) = self.omega.iter().find(|w| !w.is_finite()) {
            return Err(Error::Input(format!("guidance scale {w}")));
        }
        let scaled: Vec<f64> = self.omega.iter().map(|w| w / self.pathway.norm).collect();
        let f = tape.constant(self.pathway.fourier.encode_scalars(&scaled)?);
        let e = self.pathway.proj.forward(tape, self.p, f)?;
        tape.add(temb, e)
    }
}

/// Fully fine-tuned copy of the base with an ω pathway: the guidance
/// distillation baseline.
#[derive(Clone, Debug)]
pub struct GdModel {
    pub model: Denoiser,
    pub pathway: OmegaPathway,
}

impl GdModel {
    /// Clones `base` (which is left untouched) and unfreezes the copy.
    pub fn new(base: &Denoiser, pathway: OmegaPathway) -> Result<Self> {
        if pathway.proj.out_dim != base.embed_dim() {
            return Err(Error::Compatibility(format!(
                "ω pathway width {} vs base embedding {}",
                pathway.proj.out_dim,
                base.embed_dim()
            )));
        }
        let mut model = base.clone();
        model.unfreeze();
        Ok(Self { model, pathway })
    }

    pub fn num_params(&self) -> usize {
        self.model.num_params() + self.pathway.params.numel()
    }

    pub fn hash(&self) -> u64 {
        crate::hash::Fnv::new()
            .u64(self.model.param_hash())
            .u64(self.pathway.params.hash())
            .f64s(self.pathway.fourier.frequencies().as_slice())
            .finish()
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        pw: &Bound,
        x: Var,
        sigma: &[f64],
        cond: &[Cond],
        omega: &[f64],
    ) -> Result<Var> {
        if cond.iter().any(|c| *c == Cond::Null) {
            return Err(Error::Input("the distilled model is class-conditional; got the null condition".into()));
        }
        if omega.len() != cond.len() {
            return Err(Error::dim("gd_forward", format!("{} scales for {} rows", omega.len(), cond.len())));
        }
        let mut hook = OmegaHook {
            pathway: &self.pathway,
            p: pw,
            omega,
        };
        self.model.forward(tape, p, x, sigma, cond, &mut hook)
    }
}

impl EpsModel for GdModel {
    fn data_dim(&self) -> usize {
        self.model.data_dim()
    }

    fn predict(&self, x: &Matrix, sigma: &[f64], cond: &[Cond], omega: &[f64]) -> Result<Matrix> {
        let mut tape = Tape::new();
        let p = tape.bind(self.model.params(), false);
        let pw = tape.bind(&self.pathway.params, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &p, &pw, xv, sigma, cond, omega)?;
        let m = tape.value(out);
        if !m.is_finite() {
            return Err(Error::Numeric("fine-tuned model output".into()));
        }
        Ok(m.clone())
    }

    fn nfe(&self) -> u64 {
        self.model.nfe()
    }
}
