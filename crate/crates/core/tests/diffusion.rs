use agd::diffusion::{
    sample, train_base, AnalyticDenoiser, Cond, Denoiser, DenoiserSpec, GaussianComponent, NoiseSchedule,
    SamplerKind, ToyDataset, TrainConfig,
};
use agd::nn::Matrix;
use agd::rng;
use rand::Rng as _;

fn fd_score(ds: &ToyDataset, x: &[f64], sigma: f64, c: Cond) -> Vec<f64> {
    let h = 1e-5;
    (0..x.len())
        .map(|i| {
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[i] += h;
            b[i] -= h;
            (ds.log_density(&a, sigma, c) - ds.log_density(&b, sigma, c)) / (2.0 * h)
        })
        .collect()
}

fn random_mixture(seed: u64) -> ToyDataset {
    let mut r = rng::stream(seed, &[77]);
    let classes = (0..3)
        .map(|_| {
            let n = 1 + r.random_range(0..3);
            let raw: Vec<f64> = (0..n).map(|_| 0.2 + r.random::<f64>()).collect();
            let total: f64 = raw.iter().sum();
            raw.iter()
                .map(|w| {
                    let mean = vec![r.random_range(-3.0..3.0), r.random_range(-3.0..3.0)];
                    let (a, b, c) = (r.random_range(0.2..1.0), r.random_range(-0.3..0.3), r.random_range(0.2..1.0));
                    // A Aᵀ with A = [[a, 0], [b, c]]
                    let cov = Matrix::from_rows(&[vec![a * a, a * b], vec![a * b, b * b + c * c]]).unwrap();
                    GaussianComponent::new(w / total, mean, cov).unwrap()
                })
                .collect()
        })
        .collect();
    ToyDataset::new(classes).unwrap()
}

#[test]
fn analytic_score_single_gaussian_closed_form() {
    let mu = [1.0, -2.0];
    let s = 0.7;
    let ds = ToyDataset::single_gaussian(&mu, s).unwrap();
    for &(x, sigma) in &[([0.0, 0.0], 0.0), ([3.0, 1.0], 0.5), ([-1.0, 4.0], 8.0)] {
        let got = ds.score(&x, sigma, Cond::Class(0));
        for i in 0..2 {
            let want = -(x[i] - mu[i]) / (s * s + sigma * sigma);
            assert!((got[i] - want).abs() < 1e-12, "{got:?}");
        }
    }
}

#[test]
fn analytic_score_vanishes_at_symmetric_mixture_mean() {
    let cov = Matrix::from_rows(&[vec![0.3, 0.1], vec![0.1, 0.5]]).unwrap();
    let comps = vec![
        GaussianComponent::new(0.5, vec![2.0, 1.0], cov.clone()).unwrap(),
        GaussianComponent::new(0.5, vec![-2.0, -1.0], cov).unwrap(),
    ];
    let ds = ToyDataset::new(vec![comps]).unwrap();
    for sigma in [0.0, 0.3, 2.0] {
        let s = ds.score(&[0.0, 0.0], sigma, Cond::Class(0));
        assert!(s.iter().all(|v| v.abs() < 1e-12), "{s:?}");
    }
}

#[test]
fn analytic_score_matches_finite_differences() {
    for seed in 0..10 {
        let ds = random_mixture(seed);
        let mut r = rng::stream(seed, &[78]);
        for _ in 0..5 {
            let x = [r.random_range(-4.0..4.0), r.random_range(-4.0..4.0)];
            let sigma = [0.0, 0.05, 0.5, 3.0][r.random_range(0..4)];
            for c in [Cond::Class(0), Cond::Class(2), Cond::Null] {
                let a = ds.score(&x, sigma, c);
                let f = fd_score(&ds, &x, sigma, c);
                for i in 0..2 {
                    assert!((a[i] - f[i]).abs() < 1e-6, "seed {seed} {c:?}: {a:?} vs {f:?}");
                }
            }
        }
    }
}

#[test]
fn null_condition_density_is_class_average() {
    let ds = random_mixture(4);
    let x = [0.3, -0.8];
    let avg: f64 = (0..3)
        .map(|k| ds.log_density(&x, 0.4, Cond::Class(k)).exp())
        .sum::<f64>()
        / 3.0;
    assert!((ds.log_density(&x, 0.4, Cond::Null) - avg.ln()).abs() < 1e-12);
}

/// For `N(μ, s²I)` the Euler recursion is linear:
/// `x_{i+1} − μ = (1 + h_i σ_i / (s² + σ_i²)) (x_i − μ)`.
fn euler_gain(grid: &[f64], s: f64) -> f64 {
    grid.windows(2)
        .map(|w| 1.0 + (w[1] - w[0]) * w[0] / (s * s + w[0] * w[0]))
        .product()
}

#[test]
fn oracle_sampler_is_the_scalar_euler_recursion() {
    let mu = [1.0, -0.5];
    let s = 0.2;
    let ds = ToyDataset::single_gaussian(&mu, s).unwrap();
    let oracle = AnalyticDenoiser::new(&ds);
    let sched = NoiseSchedule::default();
    let gain = euler_gain(&sched.grid(), s);
    let out = agd::diffusion::sample_batch(
        &oracle,
        &sched,
        SamplerKind::DeterministicEuler,
        &[Cond::Class(0); 4],
        &[1.0; 4],
        &[0, 1, 2, 3],
        true,
    )
    .unwrap();
    for i in 0..4 {
        for j in 0..2 {
            let ratio = (out.x0.get(i, j) - mu[j]) / (out.steps[0].x.get(i, j) - mu[j]);
            assert!((ratio - gain).abs() < 1e-12 * gain, "{ratio} vs {gain}");
        }
    }
}

/// Moments over 10⁴ seeds against the Euler-gain prediction
/// `mean = μ (1 − P)`, `var = P² σ_max²`.
#[test]
fn oracle_sampler_moments() {
    let mu = [1.0, -0.5];
    let s = 0.2;
    let ds = ToyDataset::single_gaussian(&mu, s).unwrap();
    let oracle = AnalyticDenoiser::new(&ds);
    let sched = NoiseSchedule::default();
    let gain = euler_gain(&sched.grid(), s);
    let n = 10_000;
    let seeds: Vec<u64> = (0..n as u64).collect();
    let x = sample(
        &oracle,
        &sched,
        SamplerKind::DeterministicEuler,
        &vec![Cond::Class(0); n],
        &vec![1.0; n],
        &seeds,
    )
    .unwrap();
    let sd = gain * sched.sigma_max;
    for j in 0..2 {
        let mean = (0..n).map(|i| x.get(i, j)).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (x.get(i, j) - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - mu[j] * (1.0 - gain)).abs() < 4.0 * sd / (n as f64).sqrt());
        assert!((var / (sd * sd) - 1.0).abs() < 4.0 * (2.0 / n as f64).sqrt());
        assert!((mean - mu[j]).abs() / mu[j].abs() < 0.03);
    }
    assert_eq!(oracle_nfe(&oracle), 64 * n as u64);
}

fn oracle_nfe(m: &AnalyticDenoiser) -> u64 {
    agd::diffusion::EpsModel::nfe(m)
}

fn small_spec(classes: usize) -> DenoiserSpec {
    DenoiserSpec {
        num_classes: classes,
        width: 64,
        depth: 2,
        embed_dim: 16,
        fourier_frequencies: 8,
        ..DenoiserSpec::default()
    }
}

#[test]
fn trained_denoiser_matches_gaussian_oracle() {
    let mu = [1.0, -0.5];
    let s = 0.5;
    let ds = ToyDataset::single_gaussian(&mu, s).unwrap();
    let sched = NoiseSchedule::default();
    let cfg = TrainConfig {
        steps: 2000,
        batch: 128,
        ..TrainConfig::default()
    };
    let (model, logs) = train_base(&ds, &small_spec(1), &sched, &cfg, 11).unwrap();

    // converged loss against the zero predictor (E‖ε‖² = d)
    let tail: f64 = logs[logs.len() - 200..].iter().map(|l| l.loss).sum::<f64>() / 200.0;
    assert!(tail <= 0.9 * 2.0, "tail loss {tail}");
    let head: f64 = logs[..200].iter().map(|l| l.loss).sum::<f64>() / 200.0;
    assert!(tail < head);

    let grid = sched.grid();
    let per_sigma = 64;
    let mut r = rng::stream(5, &[79]);
    let mut total = 0.0;
    let mut count = 0;
    for &sigma in &grid[..grid.len() - 1] {
        let mut x = Matrix::zeros(per_sigma, 2);
        for i in 0..per_sigma {
            let p = ds.sample(0, &mut r);
            let e = agd::diffusion::forward_perturb(&p, sigma, r.random()).1;
            for j in 0..2 {
                x.set(i, j, p[j] + sigma * e[j]);
            }
        }
        let eps = model.eps(&x, &vec![sigma; per_sigma], &vec![Cond::Class(0); per_sigma]).unwrap();
        for i in 0..per_sigma {
            for j in 0..2 {
                let want = sigma * (x.get(i, j) - mu[j]) / (s * s + sigma * sigma);
                total += (eps.get(i, j) - want).powi(2);
            }
            count += 1;
        }
    }
    let msd = total / count as f64;
    assert!(msd < 0.05, "mean squared deviation {msd}");
}

#[test]
fn full_condition_dropout_never_trains_class_rows() {
    let ds = ToyDataset::ring(&Default::default()).unwrap();
    let spec = small_spec(8);
    let cfg = TrainConfig {
        steps: 50,
        batch: 32,
        cond_dropout: 1.0,
        ..TrainConfig::default()
    };
    let (trained, _) = train_base(&ds, &spec, &NoiseSchedule::default(), &cfg, 2).unwrap();
    let init = Denoiser::new(spec, 2).unwrap();
    let find = |m: &Denoiser| {
        m.params()
            .iter()
            .find(|(n, _)| *n == "class_table")
            .map(|(_, v)| v.clone())
            .unwrap()
    };
    let (a, b) = (find(&init), find(&trained));
    for k in 0..8 {
        assert_eq!(a.row(k), b.row(k), "class row {k} moved");
    }
    assert_ne!(a.row(8), b.row(8), "null row never trained");
}
