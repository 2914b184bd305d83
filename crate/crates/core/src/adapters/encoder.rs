use crate::error::{Error, Result};
use crate::nn::{Activation, Bound, FourierEncoder, Linear, Matrix, Mlp, ParamStore, Tape, Var};
use crate::rng::Rng;

/// Maps `(ω, class embedding, noise-level embedding)` to three rows of
/// width `d_a`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionEncoder {
    pub omega_fourier: FourierEncoder,
    /// Divisor applied to ω before the Fourier features.
    pub omega_norm: f64,
    pub omega_mlp: Mlp,
    pub class_proj: Linear,
    pub sigma_proj: Linear,
    pub width: usize,
}

impl ConditionEncoder {
    pub fn new(
        store: &mut ParamStore,
        omega_fourier: FourierEncoder,
        omega_norm: f64,
        embed_dim: usize,
        width: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let omega_mlp = Mlp::new(
            store,
            "enc.omega",
            &[omega_fourier.output_dim(), width, width],
            Activation::Silu,
            0.0,
            rng,
        )?;
        let class_proj = Linear::new(store, "enc.class", embed_dim, width, rng);
        let sigma_proj = Linear::new(store, "enc.sigma", embed_dim, width, rng);
        Ok(Self {
            omega_fourier,
            omega_norm,
            omega_mlp,
            class_proj,
            sigma_proj,
            width,
        })
    }

    /// `[c_ω, c_class, c_σ]`, each `B x width`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, omega: &[f64], temb: Var, cemb: Var) -> Result<[Var; 3]> {
        if let Some(w) = omega.iter().find(|w| !w.is_finite()) {
            return Err(Error::Input(format!("guidance scale {w}")));
        }
        let scaled: Vec<f64> = omega.iter().map(|w| w / self.omega_norm).collect();
        let feats = tape.constant(self.omega_fourier.encode_scalars(&scaled)?);
        let c_omega = self.omega_mlp.forward(tape, p, feats, None)?;
        let c_class = self.class_proj.forward(tape, p, cemb)?;
        let c_sigma = self.sigma_proj.forward(tape, p, temb)?;
        Ok([c_omega, c_class, c_sigma])
    }
}

/// Stack per-sample condition rows into one `m x width` matrix for sample
/// `b`.
pub(crate) fn condition_matrix(tape: &Tape, conds: &[Var], b: usize) -> Matrix {
    let rows: Vec<Vec<f64>> = conds.iter().map(|&c| tape.value(c).row(b).to_vec()).collect();
    Matrix::from_rows(&rows).expect("condition rows share a width")
}
