use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::rng::{self, tag, Rng};

/// Conditioning label: a class index or the null condition `∅`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Cond {
    Class(usize),
    Null,
}

impl Cond {
    pub fn class(self) -> Option<usize> {
        match self {
            Cond::Class(c) => Some(c),
            Cond::Null => None,
        }
    }

    /// Encoded as `-1` for `∅`.
    pub fn to_i64(self) -> i64 {
        match self {
            Cond::Class(c) => c as i64,
            Cond::Null => -1,
        }
    }

    pub fn from_i64(v: i64) -> Option<Self> {
        match v {
            -1 => Some(Cond::Null),
            c if c >= 0 => Some(Cond::Class(c as usize)),
            _ => None,
        }
    }
}

/// Cholesky factor of a small SPD matrix.
#[derive(Clone, Debug, PartialEq)]
struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    fn new(a: &Matrix) -> Option<Self> {
        let n = a.rows();
        let mut l = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut s = a.get(i, j);
                for k in 0..j {
                    s -= l.get(i, k) * l.get(j, k);
                }
                if i == j {
                    if s <= 0.0 || !s.is_finite() {
                        return None;
                    }
                    l.set(i, i, s.sqrt());
                } else {
                    l.set(i, j, s / l.get(j, j));
                }
            }
        }
        Some(Self { l })
    }

    fn log_det(&self) -> f64 {
        (0..self.l.rows()).map(|i| 2.0 * self.l.get(i, i).ln()).sum()
    }

    /// Solve `A x = b`.
    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l.get(i, k) * y[k];
            }
            y[i] = s / self.l.get(i, i);
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= self.l.get(k, i) * x[k];
            }
            x[i] = s / self.l.get(i, i);
        }
        x
    }

    /// `L z`.
    fn mul(&self, z: &[f64]) -> Vec<f64> {
        (0..z.len())
            .map(|i| (0..=i).map(|k| self.l.get(i, k) * z[k]).sum())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: Matrix,
    chol: Cholesky,
}

impl GaussianComponent {
    pub fn new(weight: f64, mean: Vec<f64>, cov: Matrix) -> Result<Self> {
        let d = mean.len();
        if cov.shape() != (d, d) {
            return Err(Error::Input(format!("covariance must be {d}x{d}")));
        }
        for i in 0..d {
            for j in 0..i {
                if (cov.get(i, j) - cov.get(j, i)).abs() > 1e-12 * (1.0 + cov.get(i, j).abs()) {
                    return Err(Error::Input("covariance is not symmetric".into()));
                }
            }
        }
        let chol = Cholesky::new(&cov)
            .ok_or_else(|| Error::Input("covariance is not positive definite".into()))?;
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(Error::Input(format!("component weight {weight}")));
        }
        Ok(Self {
            weight,
            mean,
            cov,
            chol,
        })
    }

    fn smoothed(&self, sigma: f64) -> Cholesky {
        let mut c = self.cov.clone();
        for i in 0..c.rows() {
            c.set(i, i, c.get(i, i) + sigma * sigma);
        }
        Cholesky::new(&c).expect("SPD plus a non-negative ridge stays SPD")
    }
}

/// Layout of the default ring-of-mixtures dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RingSpec {
    pub classes: usize,
    pub components_per_class: usize,
    pub radius: f64,
    /// Angular spacing between the components of one class, in radians.
    pub spread: f64,
    pub radial_std: f64,
    pub tangential_std: f64,
    /// Component weights within a class; normalized on construction.
    pub weights: Vec<f64>,
}

impl Default for RingSpec {
    fn default() -> Self {
        Self {
            classes: 8,
            components_per_class: 2,
            radius: 2.0,
            spread: std::f64::consts::PI / 8.0,
            radial_std: 0.15,
            tangential_std: 0.3,
            weights: vec![0.6, 0.4],
        }
    }
}

/// Class-conditional Gaussian mixtures with closed-form smoothed densities.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    dim: usize,
    classes: Vec<Vec<GaussianComponent>>,
}

impl ToyDataset {
    pub fn new(classes: Vec<Vec<GaussianComponent>>) -> Result<Self> {
        let dim = classes
            .first()
            .and_then(|c| c.first())
            .map(|c| c.mean.len())
            .ok_or_else(|| Error::Input("dataset needs at least one component".into()))?;
        for (k, comps) in classes.iter().enumerate() {
            if comps.is_empty() {
                return Err(Error::Input(format!("class {k} has no components")));
            }
            if comps.iter().any(|c| c.mean.len() != dim) {
                return Err(Error::Input("components disagree on dimension".into()));
            }
            let total: f64 = comps.iter().map(|c| c.weight).sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::Input(format!("class {k} weights sum to {total}")));
            }
        }
        Ok(Self { dim, classes })
    }

    /// One class, a single isotropic Gaussian `N(mean, std² I)`.
    pub fn single_gaussian(mean: &[f64], std: f64) -> Result<Self> {
        let d = mean.len();
        let mut cov = Matrix::identity(d);
        for i in 0..d {
            cov.set(i, i, std * std);
        }
        Self::new(vec![vec![GaussianComponent::new(1.0, mean.to_vec(), cov)?]])
    }

    pub fn ring(spec: &RingSpec) -> Result<Self> {
        if spec.classes == 0 || spec.components_per_class == 0 {
            return Err(Error::Input("ring needs classes and components".into()));
        }
        if spec.weights.len() != spec.components_per_class {
            return Err(Error::Input(format!(
                "{} weights for {} components",
                spec.weights.len(),
                spec.components_per_class
            )));
        }
        let wsum: f64 = spec.weights.iter().sum();
        let mut classes = Vec::with_capacity(spec.classes);
        for k in 0..spec.classes {
            let center = std::f64::consts::TAU * k as f64 / spec.classes as f64;
            let mut comps = Vec::with_capacity(spec.components_per_class);
            for j in 0..spec.components_per_class {
                let offset = j as f64 - (spec.components_per_class - 1) as f64 / 2.0;
                let angle = center + offset * spec.spread;
                let (s, c) = angle.sin_cos();
                let mean = vec![spec.radius * c, spec.radius * s];
                // radial axis (c, s), tangential axis (−s, c)
                let (vr, vt) = (spec.radial_std.powi(2), spec.tangential_std.powi(2));
                let cov = Matrix::from_rows(&[
                    vec![vr * c * c + vt * s * s, (vr - vt) * c * s],
                    vec![(vr - vt) * c * s, vr * s * s + vt * c * c],
                ])?;
                comps.push(GaussianComponent::new(spec.weights[j] / wsum, mean, cov)?);
            }
            classes.push(comps);
        }
        Self::new(classes)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn components(&self, class: usize) -> &[GaussianComponent] {
        &self.classes[class]
    }

    pub fn check_cond(&self, c: Cond) -> Result<()> {
        match c {
            Cond::Class(k) if k >= self.num_classes() => {
                Err(Error::Input(format!("unknown class {k}")))
            }
            _ => Ok(()),
        }
    }

    /// Mixture components of `p(x | c)`; for `∅` all classes with equal
    /// class weight.
    fn mixture(&self, c: Cond) -> Vec<(f64, &GaussianComponent)> {
        match c {
            Cond::Class(k) => self.classes[k].iter().map(|g| (g.weight, g)).collect(),
            Cond::Null => {
                let kw = 1.0 / self.num_classes() as f64;
                self.classes
                    .iter()
                    .flatten()
                    .map(|g| (kw * g.weight, g))
                    .collect()
            }
        }
    }

    pub fn sample(&self, class: usize, rng: &mut Rng) -> Vec<f64> {
        let comps = &self.classes[class];
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = comps.len() - 1;
        for (i, c) in comps.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                pick = i;
                break;
            }
        }
        let g = &comps[pick];
        let z: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
        g.chol
            .mul(&z)
            .iter()
            .zip(&g.mean)
            .map(|(a, m)| a + m)
            .collect()
    }

    /// `n` samples with class `i % num_classes` for row `i`.
    pub fn sample_cycling(&self, n: usize, seed: u64) -> Matrix {
        let mut r = rng::stream(seed, &[tag::DATA]);
        let k = self.num_classes();
        let mut out = Matrix::zeros(n, self.dim);
        for i in 0..n {
            let x = self.sample(i % k, &mut r);
            out.row_mut(i).copy_from_slice(&x);
        }
        out
    }

    /// `log p_σ(x | c)` where `p_σ` is the data density convolved with
    /// `N(0, σ² I)`.
    pub fn log_density(&self, x: &[f64], sigma: f64, c: Cond) -> f64 {
        let terms: Vec<f64> = self
            .mixture(c)
            .into_iter()
            .map(|(w, g)| w.ln() + log_normal(x, &g.mean, &g.smoothed(sigma)))
            .collect();
        log_sum_exp(&terms)
    }

    /// `∇ₓ log p_σ(x | c)`.
    pub fn score(&self, x: &[f64], sigma: f64, c: Cond) -> Vec<f64> {
        let mix = self.mixture(c);
        let mut logs = Vec::with_capacity(mix.len());
        let mut grads = Vec::with_capacity(mix.len());
        for (w, g) in mix {
            let ch = g.smoothed(sigma);
            logs.push(w.ln() + log_normal(x, &g.mean, &ch));
            let diff: Vec<f64> = x.iter().zip(&g.mean).map(|(a, m)| a - m).collect();
            grads.push(ch.solve(&diff));
        }
        let lse = log_sum_exp(&logs);
        let mut s = vec![0.0; self.dim];
        for (l, g) in logs.iter().zip(&grads) {
            let r = (l - lse).exp();
            for (si, gi) in s.iter_mut().zip(g) {
                *si -= r * gi;
            }
        }
        s
    }

    /// Overall per-axis standard deviation, pooled over classes.
    pub fn pooled_std(&self) -> f64 {
        let mix = self.mixture(Cond::Null);
        let mut mean = vec![0.0; self.dim];
        for (w, g) in &mix {
            for (m, v) in mean.iter_mut().zip(&g.mean) {
                *m += w * v;
            }
        }
        let mut var = 0.0;
        for (w, g) in &mix {
            for i in 0..self.dim {
                var += w * (g.cov.get(i, i) + (g.mean[i] - mean[i]).powi(2));
            }
        }
        (var / self.dim as f64).sqrt()
    }
}

fn log_normal(x: &[f64], mean: &[f64], ch: &Cholesky) -> f64 {
    let diff: Vec<f64> = x.iter().zip(mean).map(|(a, m)| a - m).collect();
    let sol = ch.solve(&diff);
    let maha: f64 = diff.iter().zip(&sol).map(|(a, b)| a * b).sum();
    let d = x.len() as f64;
    -0.5 * (maha + ch.log_det() + d * (std::f64::consts::TAU).ln())
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_weights_and_covariances_are_valid() {
        let ds = ToyDataset::ring(&RingSpec::default()).unwrap();
        assert_eq!(ds.num_classes(), 8);
        assert_eq!(ds.dim(), 2);
        for k in 0..8 {
            let w: f64 = ds.components(k).iter().map(|c| c.weight).sum();
            assert!((w - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let bad_cov = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(GaussianComponent::new(1.0, vec![0.0, 0.0], bad_cov).is_err());
        let asym = Matrix::from_rows(&[vec![1.0, 0.1], vec![0.0, 1.0]]).unwrap();
        assert!(GaussianComponent::new(1.0, vec![0.0, 0.0], asym).is_err());
        let g = GaussianComponent::new(0.5, vec![0.0, 0.0], Matrix::identity(2)).unwrap();
        assert!(ToyDataset::new(vec![vec![g]]).is_err());
        let ds = ToyDataset::single_gaussian(&[0.0, 0.0], 1.0).unwrap();
        assert!(ds.check_cond(Cond::Class(1)).is_err());
        assert!(ds.check_cond(Cond::Null).is_ok());
    }

    #[test]
    fn sample_moments_match_single_gaussian() {
        let ds = ToyDataset::single_gaussian(&[1.0, -2.0], 0.5).unwrap();
        let xs = ds.sample_cycling(20_000, 3);
        for d in 0..2 {
            let m = (0..xs.rows()).map(|r| xs.get(r, d)).sum::<f64>() / xs.rows() as f64;
            let v = (0..xs.rows()).map(|r| (xs.get(r, d) - m).powi(2)).sum::<f64>() / xs.rows() as f64;
            assert!((m - [1.0, -2.0][d]).abs() < 0.02);
            assert!((v - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn cond_round_trips_through_integer_encoding() {
        for c in [Cond::Null, Cond::Class(0), Cond::Class(7)] {
            assert_eq!(Cond::from_i64(c.to_i64()), Some(c));
        }
        assert_eq!(Cond::from_i64(-2), None);
    }
}
