use crate::error::{Error, Result};
use crate::nn::Matrix;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn mean_pairwise(a: &Matrix, b: &Matrix) -> f64 {
    let mut total = 0.0;
    for i in 0..a.rows() {
        let ai = a.row(i);
        let mut row = 0.0;
        for j in 0..b.rows() {
            row += dist(ai, b.row(j));
        }
        total += row;
    }
    total / (a.rows() as f64 * b.rows() as f64)
}

fn check_sets(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::Input(format!("{op}: empty point set")));
    }
    if a.cols() != b.cols() {
        return Err(Error::dim(op, format!("point widths {} vs {}", a.cols(), b.cols())));
    }
    Ok(())
}

/// V-statistic energy distance `2E‖a−b‖ − E‖a−a'‖ − E‖b−b'‖` between the
/// empirical distributions of the rows of `a` and `b`.
pub fn energy_distance(a: &Matrix, b: &Matrix) -> Result<f64> {
    check_sets("energy_distance", a, b)?;
    let ab = mean_pairwise(a, b);
    let aa = mean_pairwise(a, a);
    let bb = mean_pairwise(b, b);
    Ok((2.0 * ab - aa - bb).max(0.0))
}

/// Distance from each row to its `k`-th nearest other row.
fn knn_radii(x: &Matrix, k: usize) -> Vec<f64> {
    let n = x.rows();
    let mut d = vec![0.0; n];
    (0..n)
        .map(|i| {
            for j in 0..n {
                d[j] = dist(x.row(i), x.row(j));
            }
            d[i] = f64::INFINITY;
            let (_, kth, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
            *kth
        })
        .collect()
}

fn coverage(points: &Matrix, centers: &Matrix, radii: &[f64]) -> f64 {
    let hit = (0..points.rows())
        .filter(|&i| (0..centers.rows()).any(|j| dist(points.row(i), centers.row(j)) <= radii[j]))
        .count();
    hit as f64 / points.rows() as f64
}

/// Improved precision and recall with `k`-NN balls: precision is the share
/// of generated points inside some real point's ball, recall the share of
/// real points inside some generated point's ball.
pub fn knn_precision_recall(gen: &Matrix, real: &Matrix, k: usize) -> Result<(f64, f64)> {
    check_sets("knn_precision_recall", gen, real)?;
    if k == 0 || k >= gen.rows() || k >= real.rows() {
        return Err(Error::Input(format!(
            "k = {k} needs both sets larger than k (sizes {} and {})",
            gen.rows(),
            real.rows()
        )));
    }
    let real_r = knn_radii(real, k);
    let gen_r = knn_radii(gen, k);
    Ok((coverage(gen, real, &real_r), coverage(real, gen, &gen_r)))
}
