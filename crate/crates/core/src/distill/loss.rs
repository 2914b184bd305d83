use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Matrix, Tape, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    L2,
    L1,
    /// `λ(σ)‖·‖²` with `λ(σ) = σ^(−p)`.
    WeightedL2,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Exponent `p` of `λ(σ) = σ^(−p)`; only read by `WeightedL2`.
    pub lambda_power: f64,
}

impl LossSpec {
    pub fn l2() -> Self {
        Self {
            kind: LossKind::L2,
            lambda_power: 0.0,
        }
    }

    pub fn weight(&self, sigma: f64) -> f64 {
        match self.kind {
            LossKind::WeightedL2 => sigma.powf(-self.lambda_power),
            _ => 1.0,
        }
    }

    /// Batch-mean loss on `tape`.
    pub fn build(&self, tape: &mut Tape, pred: Var, target: &Matrix, sigma: &[f64]) -> Result<Var> {
        let w: Vec<f64> = sigma.iter().map(|&s| self.weight(s)).collect();
        match self.kind {
            LossKind::L1 => tape.abs_error(pred, target, &w),
            LossKind::L2 | LossKind::WeightedL2 => tape.squared_error(pred, target, &w),
        }
    }
}

/// Per-sample loss between two points.
pub fn loss_eval(spec: &LossSpec, pred: &[f64], target: &[f64], sigma: f64) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::dim(
            "loss_eval",
            format!("prediction has {} entries, target {}", pred.len(), target.len()),
        ));
    }
    let diff = pred.iter().zip(target).map(|(a, b)| a - b);
    Ok(match spec.kind {
        LossKind::L1 => diff.map(f64::abs).sum(),
        LossKind::L2 | LossKind::WeightedL2 => spec.weight(sigma) * diff.map(|d| d * d).sum::<f64>(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const ALL: [LossSpec; 3] = [
        LossSpec {
            kind: LossKind::L2,
            lambda_power: 0.0,
        },
        LossSpec {
            kind: LossKind::L1,
            lambda_power: 0.0,
        },
        LossSpec {
            kind: LossKind::WeightedL2,
            lambda_power: 2.0,
        },
    ];

    #[test]
    fn examples() {
        for s in ALL {
            assert_eq!(loss_eval(&s, &[1.0, -2.0], &[1.0, -2.0], 0.3).unwrap(), 0.0);
        }
        assert_eq!(loss_eval(&ALL[0], &[3.0, 4.0], &[0.0, 0.0], 1.0).unwrap(), 25.0);
        assert_eq!(loss_eval(&ALL[1], &[3.0, 4.0], &[0.0, 0.0], 1.0).unwrap(), 7.0);
        assert_eq!(loss_eval(&ALL[2], &[3.0, 4.0], &[0.0, 0.0], 0.5).unwrap(), 100.0);
        assert!(loss_eval(&ALL[0], &[1.0], &[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn tape_loss_matches_pointwise_mean() {
        let pred = Matrix::from_rows(&[vec![0.5, 1.0], vec![-2.0, 3.0]]).unwrap();
        let target = Matrix::from_rows(&[vec![0.0, 1.5], vec![1.0, 1.0]]).unwrap();
        let sigma = [0.2, 3.0];
        for s in ALL {
            let mut tape = Tape::new();
            let p = tape.constant(pred.clone());
            let l = s.build(&mut tape, p, &target, &sigma).unwrap();
            let want = (0..2)
                .map(|i| loss_eval(&s, pred.row(i), target.row(i), sigma[i]).unwrap())
                .sum::<f64>()
                / 2.0;
            assert!((tape.value(l).get(0, 0) - want).abs() < 1e-12, "{s:?}");
        }
    }

    proptest! {
        #[test]
        fn unit_weight_equals_l2(
            p in prop::collection::vec(-10.0f64..10.0, 3),
            t in prop::collection::vec(-10.0f64..10.0, 3),
            sigma in 0.01f64..10.0,
        ) {
            let w = LossSpec { kind: LossKind::WeightedL2, lambda_power: 0.0 };
            prop_assert_eq!(loss_eval(&w, &p, &t, sigma).unwrap(), loss_eval(&LossSpec::l2(), &p, &t, sigma).unwrap());
        }
    }
}
