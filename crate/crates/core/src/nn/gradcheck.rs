use super::matrix::Matrix;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;

/// Maximum relative error between reverse-mode gradients of the scalar
/// built by `f` and central finite differences with step [`FD_STEP`].
///
/// The relative error of one entry is `|analytic − fd| / (|fd| + 1e-8)`.
pub fn grad_check<F>(params: &[Matrix], f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_with_step(params, FD_STEP, f)
}

pub fn grad_check_with_step<F>(params: &[Matrix], step: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Matrix> = vars
        .iter()
        .map(|&v| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(tape.shape(v).0, tape.shape(v).1))
        })
        .collect();

    let eval = |ps: &[Matrix]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.constant(p.clone())).collect();
        let l = f(&mut t, &vs)?;
        let v = t.value(l).get(0, 0);
        if !v.is_finite() {
            return Err(Error::Numeric("loss during finite differences".into()));
        }
        Ok(v)
    };

    let mut work = params.to_vec();
    let mut worst = 0.0_f64;
    for (pi, a) in analytic.iter().enumerate() {
        for k in 0..params[pi].len() {
            let orig = params[pi].as_slice()[k];
            work[pi].as_mut_slice()[k] = orig + step;
            let up = eval(&work)?;
            work[pi].as_mut_slice()[k] = orig - step;
            let down = eval(&work)?;
            work[pi].as_mut_slice()[k] = orig;
            let fd = (up - down) / (2.0 * step);
            let rel = (a.as_slice()[k] - fd).abs() / (fd.abs() + 1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
