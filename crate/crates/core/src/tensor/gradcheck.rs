use super::{Graph, Scalar, Tensor, Var};

/// `|analytic - numeric| / max(1, |numeric|)`, infinite when either side is
/// not finite.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    if !analytic.is_finite() || !numeric.is_finite() {
        return f64::INFINITY;
    }
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Compares the tape gradient of a scalar function against central finite
/// differences at every coordinate of `point`, returning the worst
/// [`relative_error`].
///
/// `f` receives a fresh graph and the leaf holding the (possibly perturbed)
/// point. It is called `2 * point.numel() + 1` times and must be
/// deterministic.
pub fn grad_check<S, E, F>(f: F, point: &Tensor<S>, eps: f64) -> f64
where
    S: Scalar,
    F: Fn(&mut Graph<S>, Var) -> Result<Var, E>,
{
    let coords: Vec<usize> = (0..point.numel()).collect();
    grad_check_coords(f, point, eps, &coords)
}

/// [`grad_check`] restricted to a subset of coordinates, for inputs too large
/// to probe exhaustively.
pub fn grad_check_coords<S, E, F>(f: F, point: &Tensor<S>, eps: f64, coords: &[usize]) -> f64
where
    S: Scalar,
    F: Fn(&mut Graph<S>, Var) -> Result<Var, E>,
{
    let analytic = match analytic_grad(&f, point) {
        Some(g) => g,
        None => return f64::INFINITY,
    };
    let eval = |t: Tensor<S>| -> f64 {
        let mut g = Graph::no_grad();
        let x = g.leaf(t);
        f(&mut g, x)
            .ok()
            .and_then(|r| g.value(r).item().ok())
            .map_or(f64::NAN, Scalar::to_f64_lossy)
    };
    let mut worst = 0.0f64;
    for &i in coords {
        let mut plus = point.clone();
        plus.data_mut()[i] = plus.data()[i] + S::of(eps);
        let mut minus = point.clone();
        minus.data_mut()[i] = minus.data()[i] - S::of(eps);
        // Use the realised step so rounding of x +/- eps does not bias the quotient.
        let step = (plus.data()[i] - minus.data()[i]).to_f64_lossy();
        let numeric = (eval(plus) - eval(minus)) / step;
        let err = relative_error(analytic[i].to_f64_lossy(), numeric);
        if err.is_nan() {
            return f64::INFINITY;
        }
        worst = worst.max(err);
    }
    worst
}

fn analytic_grad<S, E, F>(f: &F, point: &Tensor<S>) -> Option<Vec<S>>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, Var) -> Result<Var, E>,
{
    let mut g = Graph::new();
    let x = g.param(point.clone());
    let root = f(&mut g, x).ok()?;
    g.backward(root).ok()?;
    Some(
        g.grad(x)
            .map(|v| v.to_vec())
            .unwrap_or_else(|| vec![S::zero(); point.numel()]),
    )
}
