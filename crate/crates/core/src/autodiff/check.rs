use super::{Graph, Tensor, TensorError, Var};

/// Central difference of `f` along every coordinate of every point.
///
/// `f` is evaluated on fresh graphs with constant inputs, so this never
/// touches the backward pass.
pub fn central_difference<F>(
    f: &F,
    points: &[Tensor<f64>],
    h: f64,
) -> Result<Vec<Vec<f64>>, TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |pts: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = pts.iter().map(|p| g.constant(p)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.scalar(out))
    };
    let mut work: Vec<Tensor<f64>> = points
        .iter()
        .map(|p| {
            let mut c = p.clone();
            c.set_requires_grad(false);
            c
        })
        .collect();
    let mut result = Vec::with_capacity(points.len());
    for pi in 0..work.len() {
        let mut col = Vec::with_capacity(work[pi].len());
        for ci in 0..work[pi].len() {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + h;
            let up = eval(&work)?;
            work[pi].data_mut()[ci] = orig - h;
            let down = eval(&work)?;
            work[pi].data_mut()[ci] = orig;
            col.push((up - down) / (2.0 * h));
        }
        result.push(col);
    }
    Ok(result)
}

/// Max over coordinates of `|autodiff - central| / (|central| + 1e-8)`.
///
/// Runs in `f64`. Each point is recorded as a gradient-tracking leaf.
pub fn finite_diff_check<F>(f: F, points: &[Tensor<f64>], h: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = points
        .iter()
        .map(|p| {
            let mut leaf = p.clone();
            leaf.set_requires_grad(true);
            g.leaf(&leaf)
        })
        .collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let numeric = central_difference(&f, points, h)?;

    let mut worst = 0.0f64;
    for (v, num) in vars.iter().zip(&numeric) {
        let zeros;
        let auto = match grads.get(*v) {
            Some(a) => a,
            None => {
                zeros = vec![0.0; num.len()];
                &zeros
            }
        };
        for (&a, &c) in auto.iter().zip(num) {
            worst = worst.max((a - c).abs() / (c.abs() + 1e-8));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_quadratic() {
        let w = Tensor::scalar(3.0);
        let err =
            finite_diff_check(|g, v| g.mul(v[0], v[0]).and_then(|s| g.sum(s)), &[w], 1e-3).unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let w = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let c = Tensor::scalar(7.0);
        let err = finite_diff_check(
            move |g, _v| {
                let k = g.constant(&c);
                g.sum(k)
            },
            &[w],
            1e-3,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }
}
