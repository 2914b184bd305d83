use rand_distr::{Distribution, Normal};

use super::matrix::Matrix;
use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// Random Fourier features `[sin(2π x Bᵀ), cos(2π x Bᵀ)]` with a fixed,
/// seeded frequency matrix `B ~ N(0, scale²)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierEncoder {
    freqs: Matrix,
}

impl FourierEncoder {
    pub fn new(in_dim: usize, num_frequencies: usize, scale: f64, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[tag::FOURIER]);
        let normal = Normal::new(0.0, scale).expect("finite scale");
        let data = (0..num_frequencies * in_dim)
            .map(|_| normal.sample(&mut r))
            .collect();
        Self {
            freqs: Matrix::from_vec(num_frequencies, in_dim, data).expect("shape"),
        }
    }

    pub fn from_frequencies(freqs: Matrix) -> Self {
        Self { freqs }
    }

    pub fn frequencies(&self) -> &Matrix {
        &self.freqs
    }

    pub fn num_frequencies(&self) -> usize {
        self.freqs.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.freqs.cols()
    }

    pub fn output_dim(&self) -> usize {
        2 * self.freqs.rows()
    }

    /// Encode each row of `x` (`n x in_dim`) into `n x 2F` features.
    pub fn encode(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.in_dim() {
            return Err(Error::dim(
                "fourier_encode",
                format!("input width {} vs {}", x.cols(), self.in_dim()),
            ));
        }
        let f = self.num_frequencies();
        let mut out = Matrix::zeros(x.rows(), 2 * f);
        for r in 0..x.rows() {
            let xr = x.row(r);
            let row = out.row_mut(r);
            for k in 0..f {
                let phase: f64 = self
                    .freqs
                    .row(k)
                    .iter()
                    .zip(xr)
                    .map(|(b, v)| b * v)
                    .sum::<f64>()
                    * std::f64::consts::TAU;
                row[k] = phase.sin();
                row[f + k] = phase.cos();
            }
        }
        Ok(out)
    }

    /// Encode a column of scalars.
    pub fn encode_scalars(&self, xs: &[f64]) -> Result<Matrix> {
        self.encode(&Matrix::column(xs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn deterministic_under_seed() {
        let a = FourierEncoder::new(1, 16, 10.0, 3);
        let b = FourierEncoder::new(1, 16, 10.0, 3);
        let c = FourierEncoder::new(1, 16, 10.0, 4);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.output_dim(), 32);
    }

    #[test]
    fn rejects_wrong_width() {
        let e = FourierEncoder::new(2, 4, 1.0, 0);
        assert!(e.encode(&Matrix::zeros(3, 1)).is_err());
    }

    proptest! {
        #[test]
        fn features_are_bounded(x in -1e3f64..1e3, seed in 0u64..50) {
            let e = FourierEncoder::new(1, 16, 10.0, seed);
            let f = e.encode_scalars(&[x]).unwrap();
            prop_assert!(f.as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
            // sin² + cos² = 1 per frequency
            for k in 0..16 {
                let s = f.get(0, k);
                let c = f.get(0, 16 + k);
                prop_assert!((s * s + c * c - 1.0).abs() < 1e-12);
            }
        }
    }
}
