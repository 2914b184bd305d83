use rand::Rng as _;

use super::matrix::Matrix;
use super::params::{xavier, ParamId, ParamStore};
use super::tape::{Activation, Bound, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Affine layer `x W + b` with `W: in x out`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Xavier-initialized weight, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let w = store.add(format!("{name}.w"), xavier(in_dim, out_dim, rng));
        let b = store.add(format!("{name}.b"), Matrix::zeros(1, out_dim));
        Self { w, b, in_dim, out_dim }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = store.add(format!("{name}.w"), Matrix::zeros(in_dim, out_dim));
        let b = store.add(format!("{name}.b"), Matrix::zeros(1, out_dim));
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = tape.matmul(x, p.var(self.w))?;
        tape.add_bias(h, p.var(self.b))
    }

    pub fn zero_out(&self, store: &mut ParamStore) {
        store.get_mut(self.w).as_mut_slice().fill(0.0);
        store.get_mut(self.b).as_mut_slice().fill(0.0);
    }
}

/// Stack of linear layers with an activation between them (none after the
/// last layer) and optional inverted dropout on hidden activations.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
    pub dropout: f64,
}

impl Mlp {
    /// `widths = [in, hidden..., out]`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        activation: Activation,
        dropout: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Input("an MLP needs at least input and output widths".into()));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Input(format!("dropout rate {dropout} outside [0, 1)")));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Ok(Self {
            layers,
            activation,
            dropout,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn last(&self) -> &Linear {
        &self.layers[self.layers.len() - 1]
    }

    /// Forward pass. Dropout is applied only when `dropout_rng` is given.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, dropout_rng: Option<&mut Rng>) -> Result<Var> {
        let (_, cols) = tape.shape(x);
        if cols != self.in_dim() {
            return Err(Error::dim(
                "mlp_forward",
                format!("input width {cols} vs {}", self.in_dim()),
            ));
        }
        let mut rng = dropout_rng;
        let mut h = x;
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, p, h)?;
            if i + 1 < n {
                h = tape.act(h, self.activation);
                if self.dropout > 0.0 {
                    if let Some(r) = rng.as_deref_mut() {
                        h = apply_dropout(tape, h, self.dropout, r)?;
                    }
                }
            }
        }
        Ok(h)
    }
}

fn apply_dropout(tape: &mut Tape, h: Var, rate: f64, rng: &mut Rng) -> Result<Var> {
    let (rows, cols) = tape.shape(h);
    let keep = 1.0 / (1.0 - rate);
    let mask = (0..rows * cols)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let m = tape.constant(Matrix::from_vec(rows, cols, mask)?);
    tape.mul(h, m)
}

/// Standalone MLP: layer layout plus its own parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub mlp: Mlp,
    pub store: ParamStore,
}

impl MlpParams {
    pub fn new(widths: &[usize], activation: Activation, dropout: f64, rng: &mut Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "mlp", widths, activation, dropout, rng)?;
        Ok(Self { mlp, store })
    }
}

/// Evaluate an MLP on a matrix. With `train_mode` off (or a zero dropout
/// rate) the result is deterministic; in train mode `rng` drives dropout.
pub fn mlp_forward(p: &MlpParams, x: &Matrix, train_mode: bool, rng: Option<&mut Rng>) -> Result<Matrix> {
    let mut tape = Tape::new();
    let bound = tape.bind(&p.store, false);
    let xv = tape.constant(x.clone());
    let r = if train_mode { rng } else { None };
    let out = p.mlp.forward(&mut tape, &bound, xv, r)?;
    let v = tape.value(out).clone();
    v.check_finite("mlp output")?;
    Ok(v)
}
