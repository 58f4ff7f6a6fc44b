//! Distances between sample sets.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

fn check_pair(a: &Tensor, b: &Tensor) -> Result<usize> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(Error::Dataset(format!(
            "sample sets {:?} and {:?} are not [N, D] batches of one dimension",
            a.shape(),
            b.shape()
        )));
    }
    Ok(a.shape()[1])
}

fn dist(x: &[f32], y: &[f32]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn mean_cross(a: &Tensor, b: &Tensor) -> f64 {
    let (n, m) = (a.shape()[0], b.shape()[0]);
    let mut total = 0.0;
    for i in 0..n {
        let x = a.row(i);
        total += (0..m).map(|j| dist(x, b.row(j))).sum::<f64>();
    }
    total / (n * m) as f64
}

/// Two-sample energy distance `2 E‖X−Y‖ − E‖X−X'‖ − E‖Y−Y'‖`, with all
/// expectations taken over every pair (V-statistic), so it is zero for
/// identical sets and never negative.
pub fn energy_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b)?;
    if a.shape()[0] == 0 || b.shape()[0] == 0 {
        return Err(Error::EmptyBatch);
    }
    let e = 2.0 * mean_cross(a, b) - mean_cross(a, a) - mean_cross(b, b);
    Ok(e.max(0.0))
}

/// Euclidean distance between matching rows.
pub fn paired_l2(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    check_pair(a, b)?;
    if a.shape()[0] != b.shape()[0] {
        return Err(Error::Dataset(format!(
            "paired sets differ in size: {} vs {}",
            a.shape()[0],
            b.shape()[0]
        )));
    }
    Ok((0..a.shape()[0])
        .map(|i| dist(a.row(i), b.row(i)))
        .collect())
}

pub fn mean_paired_l2(a: &Tensor, b: &Tensor) -> Result<f64> {
    let d = paired_l2(a, b)?;
    if d.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Mean distance from each row to `target`.
pub fn mean_distance_to(samples: &Tensor, target: &[f32]) -> Result<f64> {
    if samples.shape().len() != 2 || samples.shape()[1] != target.len() {
        return Err(Error::Dataset(
            "target and samples differ in dimension".into(),
        ));
    }
    let n = samples.shape()[0];
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok((0..n).map(|i| dist(samples.row(i), target)).sum::<f64>() / n as f64)
}
