use serde::{Deserialize, Serialize};

use super::arch::{Adapter, Architecture, Init};
use super::encoder::ConditionEncoder;
use crate::diffusion::{Cond, Denoiser, EpsModel, TrunkHook};
use crate::error::{Error, Result};
use crate::nn::{Bound, FourierEncoder, Matrix, ParamStore, Tape, Var};
use crate::rng::{self, tag, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterSpec {
    pub architecture: Architecture,
    /// Shared adapter width `d_a`.
    pub hidden_dim: usize,
    pub init: Init,
    /// Hidden activations of width `W` are viewed as `tokens` rows of
    /// width `W / tokens`.
    pub tokens: usize,
    /// Trunk layers that receive an adapter; all hidden layers when unset.
    pub layers: Option<Vec<usize>>,
    pub dropout: f64,
    pub omega_frequencies: usize,
    pub omega_scale: f64,
    pub omega_norm: f64,
    pub positional_frequencies: usize,
}

impl Default for AdapterSpec {
    fn default() -> Self {
        Self {
            architecture: Architecture::Offset,
            hidden_dim: 5,
            init: Init::Xavier,
            tokens: 8,
            layers: None,
            dropout: 0.0,
            omega_frequencies: 16,
            omega_scale: 1.0,
            omega_norm: 10.0,
            positional_frequencies: 4,
        }
    }
}

/// Adapters for the selected trunk layers plus their condition encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterStack {
    spec: AdapterSpec,
    encoder: ConditionEncoder,
    adapters: Vec<(usize, Adapter)>,
    params: ParamStore,
    base_width: usize,
    base_embed: usize,
    base_depth: usize,
}

impl AdapterStack {
    pub fn new(spec: AdapterSpec, base: &Denoiser, seed: u64) -> Result<Self> {
        let bs = base.spec();
        let (w, e, depth) = (bs.width, bs.embed_dim, bs.depth);
        if spec.hidden_dim == 0 || spec.tokens == 0 || w % spec.tokens != 0 {
            return Err(Error::Config(format!(
                "adapter needs d_a > 0 and tokens dividing the trunk width {w} (got d_a {}, tokens {})",
                spec.hidden_dim, spec.tokens
            )));
        }
        let ok = spec.omega_frequencies > 0
            && spec.positional_frequencies > 0
            && spec.omega_scale > 0.0
            && spec.omega_norm > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid adapter spec {spec:?}")));
        }
        let layers = spec.layers.clone().unwrap_or_else(|| (0..depth).collect());
        if layers.is_empty() || layers.iter().any(|&l| l >= depth) || has_duplicates(&layers) {
            return Err(Error::Config(format!("adapter layers {layers:?} for a {depth}-layer trunk")));
        }
        let mut r = rng::stream(seed, &[tag::INIT_PARAMS, 0xada]);
        let omega_fourier = FourierEncoder::new(
            1,
            spec.omega_frequencies,
            spec.omega_scale,
            rng::derive(seed, &[0xada, 1]),
        );
        let positional = FourierEncoder::new(
            1,
            spec.positional_frequencies,
            spec.omega_scale,
            rng::derive(seed, &[0xada, 2]),
        );
        let mut params = ParamStore::new();
        let d_a = spec.hidden_dim;
        let encoder = ConditionEncoder::new(&mut params, omega_fourier, spec.omega_norm, e, d_a, &mut r)?;
        let d_tok = w / spec.tokens;
        let adapters = layers
            .iter()
            .map(|&l| {
                let a = Adapter::new(
                    spec.architecture,
                    &mut params,
                    &format!("adapter.{l}"),
                    d_tok,
                    d_a,
                    spec.init,
                    spec.dropout,
                    &positional,
                    &mut r,
                )?;
                Ok((l, a))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec,
            encoder,
            adapters,
            params,
            base_width: w,
            base_embed: e,
            base_depth: depth,
        })
    }

    /// Rebuild with stored encoders and parameters.
    pub fn from_parts(
        spec: AdapterSpec,
        base: &Denoiser,
        omega_freqs: Matrix,
        positional_freqs: Matrix,
        params: &ParamStore,
    ) -> Result<Self> {
        let mut s = Self::new(spec, base, 0)?;
        if omega_freqs.shape() != s.encoder.omega_fourier.frequencies().shape() {
            return Err(Error::Compatibility("omega Fourier frequencies have the wrong shape".into()));
        }
        s.encoder.omega_fourier = FourierEncoder::from_frequencies(omega_freqs);
        for (_, a) in &mut s.adapters {
            if let Adapter::Positional { rows, .. } = a {
                if positional_freqs.shape() != rows.frequencies().shape() {
                    return Err(Error::Compatibility("positional frequencies have the wrong shape".into()));
                }
                *rows = FourierEncoder::from_frequencies(positional_freqs.clone());
            }
        }
        s.params.load(params)?;
        Ok(s)
    }

    pub fn spec(&self) -> &AdapterSpec {
        &self.spec
    }

    pub fn encoder(&self) -> &ConditionEncoder {
        &self.encoder
    }

    pub fn adapters(&self) -> &[(usize, Adapter)] {
        &self.adapters
    }

    /// Fourier frequencies of the row encoding (shape `F x 1`; unused
    /// unless the architecture is positional).
    pub fn positional_frequencies(&self) -> Matrix {
        self.adapters
            .iter()
            .find_map(|(_, a)| match a {
                Adapter::Positional { rows, .. } => Some(rows.frequencies().clone()),
                _ => None,
            })
            .unwrap_or_else(|| Matrix::zeros(self.spec.positional_frequencies, 1))
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    /// Trainable adapter parameters relative to the frozen base.
    pub fn param_ratio(&self, base: &Denoiser) -> f64 {
        self.num_params() as f64 / base.num_params() as f64
    }

    pub fn hash(&self) -> u64 {
        crate::hash::Fnv::new()
            .u64(self.params.hash())
            .f64s(self.encoder.omega_fourier.frequencies().as_slice())
            .f64s(self.positional_frequencies().as_slice())
            .finish()
    }

    pub fn zero_outputs(&mut self) {
        for (_, a) in &self.adapters {
            a.zero_output(&mut self.params);
        }
    }

    pub fn check_base(&self, base: &Denoiser) -> Result<()> {
        let s = base.spec();
        if (s.width, s.embed_dim, s.depth) != (self.base_width, self.base_embed, self.base_depth) {
            return Err(Error::Compatibility(format!(
                "adapters built for width {} / embed {} / depth {}, base has {} / {} / {}",
                self.base_width, self.base_embed, self.base_depth, s.width, s.embed_dim, s.depth
            )));
        }
        Ok(())
    }

    /// Guided forward pass on `tape`: one base pass with residual adapter
    /// outputs added after each injected layer.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        base: &Denoiser,
        tape: &mut Tape,
        base_p: &Bound,
        p: &Bound,
        x: Var,
        sigma: &[f64],
        cond: &[Cond],
        omega: &[f64],
        dropout: Option<&mut Rng>,
    ) -> Result<Var> {
        self.check_base(base)?;
        if cond.iter().any(|c| *c == Cond::Null) {
            return Err(Error::Input("the guided model is class-conditional; got the null condition".into()));
        }
        if omega.len() != cond.len() {
            return Err(Error::dim("guided_forward", format!("{} scales for {} rows", omega.len(), cond.len())));
        }
        let mut hook = AdapterHook {
            stack: self,
            p,
            omega,
            conds: None,
            dropout,
        };
        base.forward(tape, base_p, x, sigma, cond, &mut hook)
    }

    /// `C = [c_ω; c_class; c_σ]` (`3 x d_a`) for one sample.
    pub fn encode_conditions(&self, base: &Denoiser, omega: f64, sigma: f64, c: Cond) -> Result<Matrix> {
        self.check_base(base)?;
        let mut tape = Tape::new();
        let bp = tape.bind(base.params(), false);
        let p = tape.bind(&self.params, false);
        let (temb, cemb) = base.embed(&mut tape, &bp, &[sigma], &[c])?;
        let conds = self.encoder.forward(&mut tape, &p, &[omega], temb, cemb)?;
        Ok(super::encoder::condition_matrix(&tape, &conds, 0))
    }

    /// Apply the adapter at position `slot` of the stack to one sample's
    /// token rows `z` (`L x d_tok`) and condition rows `c` (`m x d_a`).
    pub fn adapter_forward(&self, slot: usize, z: &Matrix, c: &Matrix) -> Result<Matrix> {
        let (_, a) = self
            .adapters
            .get(slot)
            .ok_or_else(|| Error::Input(format!("no adapter at slot {slot}")))?;
        let mut tape = Tape::new();
        let p = tape.bind(&self.params, false);
        let zv = tape.constant(z.clone());
        let conds: Vec<Var> = (0..c.rows())
            .map(|r| tape.constant(Matrix::row_vector(c.row(r))))
            .collect();
        let out = a.forward(&mut tape, &p, zv, &conds, z.rows(), None)?;
        Ok(tape.value(out).clone())
    }
}

fn has_duplicates(v: &[usize]) -> bool {
    v.iter().enumerate().any(|(i, a)| v[..i].contains(a))
}

struct AdapterHook<'a, 'r> {
    stack: &'a AdapterStack,
    p: &'a Bound,
    omega: &'a [f64],
    conds: Option<[Var; 3]>,
    dropout: Option<&'r mut Rng>,
}

impl TrunkHook for AdapterHook<'_, '_> {
    fn on_embeddings(&mut self, tape: &mut Tape, temb: Var, cemb: Var) -> Result<Var> {
        self.conds = Some(self.stack.encoder.forward(tape, self.p, self.omega, temb, cemb)?);
        Ok(temb)
    }

    fn on_hidden(&mut self, tape: &mut Tape, layer: usize, h: Var) -> Result<Var> {
        let Some((_, adapter)) = self.stack.adapters.iter().find(|(l, _)| *l == layer) else {
            return Ok(h);
        };
        let conds = self.conds.expect("embeddings precede hidden layers");
        let (b, w) = tape.shape(h);
        let l = self.stack.spec.tokens;
        let z = tape.reshape(h, b * l, w / l)?;
        let out = adapter.forward(tape, self.p, z, &conds, l, self.dropout.as_deref_mut())?;
        let out = tape.reshape(out, b, w)?;
        tape.add(h, out)
    }
}

/// Frozen base plus adapters: `ε_[θ,ψ](x_t, σ, c, ω)` in one pass.
pub struct GuidedModel<'a> {
    pub base: &'a Denoiser,
    pub stack: &'a AdapterStack,
}

impl<'a> GuidedModel<'a> {
    pub fn new(base: &'a Denoiser, stack: &'a AdapterStack) -> Result<Self> {
        stack.check_base(base)?;
        Ok(Self { base, stack })
    }

    /// Single-point guided prediction.
    pub fn guided_forward(&self, x: &[f64], sigma: f64, c: Cond, omega: f64) -> Result<Vec<f64>> {
        Ok(self.predict(&Matrix::row_vector(x), &[sigma], &[c], &[omega])?.into_vec())
    }
}

impl EpsModel for GuidedModel<'_> {
    fn data_dim(&self) -> usize {
        self.base.data_dim()
    }

    fn predict(&self, x: &Matrix, sigma: &[f64], cond: &[Cond], omega: &[f64]) -> Result<Matrix> {
        let mut tape = Tape::new();
        let bp = tape.bind(self.base.params(), false);
        let p = tape.bind(self.stack.params(), false);
        let xv = tape.constant(x.clone());
        let out = self.stack.forward(self.base, &mut tape, &bp, &p, xv, sigma, cond, omega, None)?;
        let m = tape.value(out);
        if !m.is_finite() {
            return Err(Error::Numeric("guided model output".into()));
        }
        Ok(m.clone())
    }

    fn nfe(&self) -> u64 {
        self.base.nfe()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::DenoiserSpec;
    use crate::nn::grad_check;
    use rand_distr::{Distribution, StandardNormal};

    fn small_base() -> Denoiser {
        let spec = DenoiserSpec {
            width: 16,
            depth: 2,
            embed_dim: 6,
            fourier_frequencies: 4,
            num_classes: 3,
            ..DenoiserSpec::default()
        };
        let mut d = Denoiser::new(spec, 3).unwrap();
        d.freeze();
        d
    }

    fn small_spec(arch: Architecture) -> AdapterSpec {
        AdapterSpec {
            architecture: arch,
            hidden_dim: 4,
            tokens: 4,
            omega_frequencies: 3,
            positional_frequencies: 2,
            ..AdapterSpec::default()
        }
    }

    fn randn(r: &mut Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| StandardNormal.sample(r)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn adapter_gradients_match_finite_differences() {
        for arch in Architecture::ALL {
            let mut worst = 0.0_f64;
            for seed in 0..20 {
                let mut r = rng::stream(seed, &[0x6c]);
                let mut store = ParamStore::new();
                let pos = FourierEncoder::new(1, 2, 1.0, seed);
                let a = Adapter::new(arch, &mut store, "a", 3, 4, Init::Xavier, 0.0, &pos, &mut r).unwrap();
                let (b, l) = (2, 3);
                let mut inputs: Vec<Matrix> = store.values().cloned().collect();
                let n_params = inputs.len();
                inputs.push(randn(&mut r, b * l, 3));
                for _ in 0..3 {
                    inputs.push(randn(&mut r, b, 4));
                }
                let proj = randn(&mut r, b * l, 3);
                let err = grad_check(&inputs, |tape, vars| {
                    let p = Bound::from_vars(vars[..n_params].to_vec());
                    let out = a.forward(tape, &p, vars[n_params], &vars[n_params + 1..], l, None)?;
                    let w = tape.constant(proj.clone());
                    let m = tape.mul(out, w)?;
                    Ok(tape.sum(m))
                })
                .unwrap();
                worst = worst.max(err);
            }
            assert!(worst < 1e-4, "{arch:?}: {worst}");
        }
    }

    #[test]
    fn end_to_end_l2_gradients_match_finite_differences() {
        let base = small_base();
        for arch in Architecture::ALL {
            let mut worst = 0.0_f64;
            for seed in 0..20 {
                let stack = AdapterStack::new(small_spec(arch), &base, seed).unwrap();
                let mut r = rng::stream(seed, &[0x6d]);
                let x = randn(&mut r, 2, 2);
                let target = randn(&mut r, 2, 2);
                let params: Vec<Matrix> = stack.params().values().cloned().collect();
                let err = grad_check(&params, |tape, vars| {
                    let bp = tape.bind(base.params(), false);
                    let p = Bound::from_vars(vars.to_vec());
                    let xv = tape.constant(x.clone());
                    let cond = [Cond::Class(seed as usize % 3), Cond::Class(1)];
                    let out = stack.forward(&base, tape, &bp, &p, xv, &[0.3, 4.0], &cond, &[2.0, 5.5], None)?;
                    tape.squared_error(out, &target, &[1.0, 1.0])
                })
                .unwrap();
                worst = worst.max(err);
            }
            assert!(worst < 1e-4, "{arch:?}: {worst}");
        }
    }

    #[test]
    fn guided_forward_gradients_reach_every_parameter() {
        let base = small_base();
        for arch in Architecture::ALL {
            let stack = AdapterStack::new(small_spec(arch), &base, 5).unwrap();
            let x = Matrix::from_rows(&[vec![0.3, -1.0], vec![1.2, 0.4]]).unwrap();
            let mut tape = Tape::new();
            let bp = tape.bind(base.params(), false);
            let p = tape.bind(stack.params(), true);
            let xv = tape.constant(x);
            let out = stack
                .forward(&base, &mut tape, &bp, &p, xv, &[0.5, 2.0], &[Cond::Class(0), Cond::Class(2)], &[1.5, 4.0], None)
                .unwrap();
            let loss = tape.squared_error(out, &Matrix::zeros(2, 2), &[1.0, 1.0]).unwrap();
            let g = tape.backward(loss).unwrap();
            for (m, (name, _)) in g.for_bound(&tape, &p).iter().zip(stack.params().iter()) {
                // zero-initialised biases can legitimately have tiny gradients;
                // weights must all receive signal
                if !name.ends_with(".b") {
                    assert!(m.max_abs() > 0.0, "{arch:?} {name}");
                }
            }
            assert!(g.get(bp.vars()[0]).is_none());
        }
    }

    #[test]
    fn zero_init_reproduces_base_exactly() {
        let base = small_base();
        let x = Matrix::from_rows(&[vec![0.3, -1.0], vec![5.0, 2.0], vec![-0.1, 0.0]]).unwrap();
        let sig = [0.02, 1.0, 9.0];
        let cond = [Cond::Class(0), Cond::Class(1), Cond::Class(2)];
        let want = base.eps(&x, &sig, &cond).unwrap();
        for arch in Architecture::ALL {
            let spec = AdapterSpec {
                init: Init::Zero,
                ..small_spec(arch)
            };
            let stack = AdapterStack::new(spec, &base, 1).unwrap();
            let g = GuidedModel::new(&base, &stack).unwrap();
            for omega in [1.0, 3.7, 12.0] {
                let got = g.predict(&x, &sig, &cond, &[omega; 3]).unwrap();
                assert_eq!(got, want, "{arch:?}");
            }
            let mut s = AdapterStack::new(small_spec(arch), &base, 1).unwrap();
            s.zero_outputs();
            assert_eq!(GuidedModel::new(&base, &s).unwrap().predict(&x, &sig, &cond, &[2.0; 3]).unwrap(), want);
        }
    }

    #[test]
    fn offset_rows_are_identical() {
        let base = small_base();
        let stack = AdapterStack::new(small_spec(Architecture::Offset), &base, 2).unwrap();
        let mut r = rng::stream(2, &[1]);
        let z = randn(&mut r, 4, 4);
        let c = stack.encode_conditions(&base, 3.0, 0.7, Cond::Class(1)).unwrap();
        let out = stack.adapter_forward(0, &z, &c).unwrap();
        for i in 1..4 {
            assert_eq!(out.row(i), out.row(0));
        }
        let z2 = randn(&mut r, 4, 4);
        assert_eq!(stack.adapter_forward(0, &z2, &c).unwrap(), out);
    }

    #[test]
    fn closed_gate_outputs_near_zero() {
        let base = small_base();
        let mut stack = AdapterStack::new(small_spec(Architecture::Gating), &base, 4).unwrap();
        let bias = match &stack.adapters()[0].1 {
            Adapter::Gating { gate_bias, .. } => *gate_bias,
            _ => unreachable!(),
        };
        stack.params_mut().get_mut(bias).set(0, 0, -1e3);
        let mut r = rng::stream(4, &[1]);
        let z = randn(&mut r, 4, 4);
        let c = stack.encode_conditions(&base, 2.0, 1.0, Cond::Class(0)).unwrap();
        assert!(stack.adapter_forward(0, &z, &c).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn single_condition_attention_returns_its_value() {
        let base = small_base();
        let stack = AdapterStack::new(small_spec(Architecture::CrossAttention), &base, 6).unwrap();
        let wv = match &stack.adapters()[0].1 {
            Adapter::CrossAttention { wv, .. } => *wv,
            _ => unreachable!(),
        };
        let mut r = rng::stream(6, &[1]);
        let z = randn(&mut r, 4, 4);
        let c = randn(&mut r, 1, 4);
        let v = crate::nn::matmul(&c, stack.params().get(wv)).unwrap();
        let out = stack.adapter_forward(0, &z, &c).unwrap();
        for i in 0..4 {
            for (a, b) in out.row(i).iter().zip(v.row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn guidance_embedding_separates_scales() {
        let base = small_base();
        let stack = AdapterStack::new(small_spec(Architecture::Offset), &base, 8).unwrap();
        let a = stack.encode_conditions(&base, 2.0, 1.0, Cond::Class(0)).unwrap();
        let b = stack.encode_conditions(&base, 2.5, 1.0, Cond::Class(0)).unwrap();
        assert_eq!(a.shape(), (3, 4));
        assert_ne!(a.row(0), b.row(0));
        assert_eq!(a.row(1), b.row(1));
        assert_eq!(a.row(2), b.row(2));
        let c = stack.encode_conditions(&base, 2.0, 1.0, Cond::Class(1)).unwrap();
        assert_ne!(a.row(1), c.row(1));
    }

    #[test]
    fn default_sizes_stay_within_parameter_budget() {
        let mut base = Denoiser::new(DenoiserSpec::default(), 0).unwrap();
        base.freeze();
        for arch in Architecture::ALL {
            let spec = AdapterSpec {
                architecture: arch,
                ..AdapterSpec::default()
            };
            let ratio = AdapterStack::new(spec, &base, 0).unwrap().param_ratio(&base);
            assert!((0.01..=0.05).contains(&ratio), "{arch:?}: {ratio}");
        }
    }

    #[test]
    fn one_network_evaluation_per_guided_call() {
        let base = small_base();
        let stack = AdapterStack::new(small_spec(Architecture::Positional), &base, 9).unwrap();
        let g = GuidedModel::new(&base, &stack).unwrap();
        let before = g.nfe();
        g.guided_forward(&[0.1, 0.2], 1.0, Cond::Class(1), 3.0).unwrap();
        assert_eq!(g.nfe() - before, 1);
    }

    #[test]
    fn rejects_null_condition_and_bad_specs() {
        let base = small_base();
        let stack = AdapterStack::new(small_spec(Architecture::Offset), &base, 1).unwrap();
        let g = GuidedModel::new(&base, &stack).unwrap();
        assert!(matches!(g.guided_forward(&[0.0, 0.0], 1.0, Cond::Null, 2.0), Err(Error::Input(_))));
        assert!(matches!(g.guided_forward(&[0.0, 0.0], 1.0, Cond::Class(0), f64::NAN), Err(Error::Input(_))));
        let bad = AdapterSpec {
            tokens: 5,
            ..small_spec(Architecture::Offset)
        };
        assert!(matches!(AdapterStack::new(bad, &base, 0), Err(Error::Config(_))));
        let bad = AdapterSpec {
            layers: Some(vec![2]),
            ..small_spec(Architecture::Offset)
        };
        assert!(matches!(AdapterStack::new(bad, &base, 0), Err(Error::Config(_))));
        let other = Denoiser::new(DenoiserSpec::default(), 0).unwrap();
        assert!(matches!(GuidedModel::new(&other, &stack), Err(Error::Compatibility(_))));
    }

    #[test]
    fn from_parts_round_trip() {
        let base = small_base();
        let s = AdapterStack::new(small_spec(Architecture::Positional), &base, 12).unwrap();
        let back = AdapterStack::from_parts(
            s.spec().clone(),
            &base,
            s.encoder().omega_fourier.frequencies().clone(),
            s.positional_frequencies(),
            s.params(),
        )
        .unwrap();
        assert_eq!(back.hash(), s.hash());
        assert_eq!(back, s);
    }
}
