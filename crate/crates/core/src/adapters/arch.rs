use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{xavier, Activation, Bound, FourierEncoder, Matrix, Mlp, ParamId, ParamStore, Tape, Var};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    CrossAttention,
    Offset,
    Gating,
    Positional,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [
        Architecture::CrossAttention,
        Architecture::Offset,
        Architecture::Gating,
        Architecture::Positional,
    ];

    pub fn code(self) -> u16 {
        match self {
            Architecture::CrossAttention => 0,
            Architecture::Offset => 1,
            Architecture::Gating => 2,
            Architecture::Positional => 3,
        }
    }

    pub fn from_code(c: u16) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.code() == c)
    }

    pub fn name(self) -> &'static str {
        match self {
            Architecture::CrossAttention => "cross_attention",
            Architecture::Offset => "offset",
            Architecture::Gating => "gating",
            Architecture::Positional => "positional",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Xavier,
    /// Output layers start at zero so the adapter is an exact identity.
    Zero,
}

/// One adapter acting on token rows `Z` (`B·L x d_tok`) given per-sample
/// condition rows (each `B x d_a`).
#[derive(Clone, Debug, PartialEq)]
pub enum Adapter {
    /// `softmax(Q Kᵀ / sqrt(d_a)) V` with `Q = Z W_q`, `K = C W_k`, `V = C W_v`.
    CrossAttention { wq: ParamId, wk: ParamId, wv: ParamId },
    /// `MLP(Σ c_i)` broadcast to every row.
    Offset { mlp: Mlp },
    /// `(sigmoid(Z̃ v + b) ⊙ MLP(Z̃)) W` with `Z̃_j = [z_j, Σ c_i]`.
    Gating { v: ParamId, gate_bias: ParamId, mlp: Mlp, w: ParamId },
    /// `MLP([e_j, Σ c_i])` with `e_j` Fourier features of `j / L`.
    Positional { mlp: Mlp, rows: FourierEncoder },
}

impl Adapter {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        arch: Architecture,
        store: &mut ParamStore,
        name: &str,
        d_tok: usize,
        d_a: usize,
        init: Init,
        dropout: f64,
        positional: &FourierEncoder,
        rng: &mut Rng,
    ) -> Result<Self> {
        let act = Activation::Silu;
        let a = match arch {
            Architecture::CrossAttention => Adapter::CrossAttention {
                wq: store.add(format!("{name}.wq"), xavier(d_tok, d_a, rng)),
                wk: store.add(format!("{name}.wk"), xavier(d_a, d_a, rng)),
                wv: store.add(format!("{name}.wv"), xavier(d_a, d_tok, rng)),
            },
            Architecture::Offset => Adapter::Offset {
                mlp: Mlp::new(store, &format!("{name}.mlp"), &[d_a, d_a, d_tok], act, dropout, rng)?,
            },
            Architecture::Gating => {
                let v = store.add(format!("{name}.gate.v"), xavier(d_tok + d_a, 1, rng));
                let gate_bias = store.add(format!("{name}.gate.b"), Matrix::zeros(1, 1));
                let mlp = Mlp::new(store, &format!("{name}.mlp"), &[d_tok + d_a, d_a, d_a], act, dropout, rng)?;
                let w = store.add(format!("{name}.w"), xavier(d_a, d_tok, rng));
                Adapter::Gating { v, gate_bias, mlp, w }
            }
            Architecture::Positional => {
                let widths = [positional.output_dim() + d_a, d_a, d_tok];
                Adapter::Positional {
                    mlp: Mlp::new(store, &format!("{name}.mlp"), &widths, act, dropout, rng)?,
                    rows: positional.clone(),
                }
            }
        };
        if init == Init::Zero {
            a.zero_output(store);
        }
        Ok(a)
    }

    pub fn architecture(&self) -> Architecture {
        match self {
            Adapter::CrossAttention { .. } => Architecture::CrossAttention,
            Adapter::Offset { .. } => Architecture::Offset,
            Adapter::Gating { .. } => Architecture::Gating,
            Adapter::Positional { .. } => Architecture::Positional,
        }
    }

    /// Zero the output projection; the adapter then returns exact zeros.
    pub fn zero_output(&self, store: &mut ParamStore) {
        match self {
            Adapter::CrossAttention { wv, .. } => store.get_mut(*wv).as_mut_slice().fill(0.0),
            Adapter::Gating { w, .. } => store.get_mut(*w).as_mut_slice().fill(0.0),
            Adapter::Offset { mlp } | Adapter::Positional { mlp, .. } => mlp.last().zero_out(store),
        }
    }

    /// `z`: `B·tokens x d_tok`; `conds`: non-empty, each `B x d_a`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        z: Var,
        conds: &[Var],
        tokens: usize,
        mut dropout: Option<&mut Rng>,
    ) -> Result<Var> {
        let &first = conds
            .first()
            .ok_or_else(|| Error::dim("adapter_forward", "no condition rows"))?;
        let (b, d_a) = tape.shape(first);
        let (zr, d_tok) = tape.shape(z);
        if tokens == 0 || zr != b * tokens {
            return Err(Error::dim(
                "adapter_forward",
                format!("{zr} token rows for {b} samples x {tokens} tokens"),
            ));
        }
        if conds.iter().any(|&c| tape.shape(c) != (b, d_a)) {
            return Err(Error::dim("adapter_forward", "condition rows differ in shape"));
        }
        self.check_widths(p, tape, d_tok, d_a)?;
        let mut csum = first;
        for &c in &conds[1..] {
            csum = tape.add(csum, c)?;
        }
        match self {
            Adapter::Offset { mlp } => {
                let o = mlp.forward(tape, p, csum, dropout)?;
                Ok(tape.repeat_rows(o, tokens))
            }
            Adapter::CrossAttention { wq, wk, wv } => {
                let q = tape.matmul(z, p.var(*wq))?;
                let inv = 1.0 / (d_a as f64).sqrt();
                let mut scores = Vec::with_capacity(conds.len());
                let mut values = Vec::with_capacity(conds.len());
                for &c in conds {
                    let k = tape.matmul(c, p.var(*wk))?;
                    let k = tape.repeat_rows(k, tokens);
                    let qk = tape.mul(q, k)?;
                    let s = tape.sum_cols(qk);
                    scores.push(tape.scale(s, inv));
                    let v = tape.matmul(c, p.var(*wv))?;
                    values.push(tape.repeat_rows(v, tokens));
                }
                let s = tape.concat_cols(&scores)?;
                let a = tape.softmax_rows(s);
                let mut out = None;
                for (j, &v) in values.iter().enumerate() {
                    let aj = tape.slice_cols(a, j, j + 1)?;
                    let term = tape.scale_rows(aj, v)?;
                    out = Some(match out {
                        None => term,
                        Some(acc) => tape.add(acc, term)?,
                    });
                }
                Ok(out.expect("at least one condition"))
            }
            Adapter::Gating { v, gate_bias, mlp, w } => {
                let crep = tape.repeat_rows(csum, tokens);
                let zt = tape.concat_cols(&[z, crep])?;
                let logits = tape.matmul(zt, p.var(*v))?;
                let logits = tape.add_bias(logits, p.var(*gate_bias))?;
                let gate = tape.act(logits, Activation::Sigmoid);
                let m = mlp.forward(tape, p, zt, dropout.as_deref_mut())?;
                let gm = tape.scale_rows(gate, m)?;
                tape.matmul(gm, p.var(*w))
            }
            Adapter::Positional { mlp, rows } => {
                let pos: Vec<f64> = (0..tokens).map(|j| j as f64 / tokens as f64).collect();
                let e = tape.constant(rows.encode_scalars(&pos)?);
                let e = tape.tile_rows(e, b);
                let crep = tape.repeat_rows(csum, tokens);
                let inp = tape.concat_cols(&[e, crep])?;
                mlp.forward(tape, p, inp, dropout)
            }
        }
    }

    fn check_widths(&self, p: &Bound, tape: &Tape, d_tok: usize, d_a: usize) -> Result<()> {
        let (want_tok, want_a) = match self {
            Adapter::CrossAttention { wq, .. } => tape.shape(p.var(*wq)),
            Adapter::Offset { mlp } => (mlp.out_dim(), mlp.in_dim()),
            Adapter::Gating { w, .. } => {
                let (a, t) = tape.shape(p.var(*w));
                (t, a)
            }
            Adapter::Positional { mlp, rows } => (mlp.out_dim(), mlp.in_dim() - rows.output_dim()),
        };
        if (d_tok, d_a) != (want_tok, want_a) {
            return Err(Error::dim(
                "adapter_forward",
                format!("Z width {d_tok} / C width {d_a}, adapter expects {want_tok} / {want_a}"),
            ));
        }
        Ok(())
    }
}
