//! Finite-difference gradient checking.
//!
//! The checker is independent of the backward pass: it re-evaluates the
//! forward function at perturbed inputs and compares central differences
//! against analytic gradients.

/// Central finite differences of a scalar function of flat parameter blocks.
pub fn finite_diff<F>(mut f: F, params: &[Vec<f64>], step: f64) -> Vec<Vec<f64>>
where
    F: FnMut(&[Vec<f64>]) -> f64,
{
    let mut grads = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = vec![0.0; params[p].len()];
        for i in 0..params[p].len() {
            let mut plus = params.to_vec();
            plus[p][i] += step;
            let fp = f(&plus);
            let mut minus = params.to_vec();
            minus[p][i] -= step;
            let fm = f(&minus);
            g[i] = (fp - fm) / (2.0 * step);
        }
        grads.push(g);
    }
    grads
}

/// Central differences at a sampled subset of coordinates of one block.
/// Returns (coordinate, numeric derivative) pairs.
pub fn finite_diff_coords<F>(
    mut f: F,
    params: &[Vec<f64>],
    block: usize,
    coords: &[usize],
    step: f64,
) -> Vec<(usize, f64)>
where
    F: FnMut(&[Vec<f64>]) -> f64,
{
    coords
        .iter()
        .map(|&i| {
            let mut plus = params.to_vec();
            plus[block][i] += step;
            let fp = f(&plus);
            let mut minus = params.to_vec();
            minus[block][i] -= step;
            let fm = f(&minus);
            (i, (fp - fm) / (2.0 * step))
        })
        .collect()
}

/// Relative error with denominator max(|a|, |b|, floor).
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest relative error across two gradient vectors.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n, 1e-8))
        .fold(0.0, f64::max)
}

/// Panics if any coordinate exceeds `tol` relative error.
pub fn assert_close(analytic: &[f64], numeric: &[f64], tol: f64, what: &str) {
    let err = max_rel_err(analytic, numeric);
    assert!(
        err <= tol,
        "{what}: max relative gradient error {err:.3e} > {tol:.1e}\nanalytic: {analytic:.6?}\nnumeric:  {numeric:.6?}"
    );
}
