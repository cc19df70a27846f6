//! Central finite-difference oracle for gradient checks.
//!
//! Evaluates the scalar function directly; it never touches the tape, so it
//! stays independent of the backward rules it is used to check.

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` at the given coordinates.
pub fn central_diff<F>(f: F, x: &[f64], coords: &[usize], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut work = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = work[i];
            work[i] = orig + h;
            let up = f(&work);
            work[i] = orig - h;
            let down = f(&work);
            work[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|, floor)`.
///
/// The floor keeps gradients that are zero up to round-off from producing
/// meaningless ratios.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Largest [`rel_err`] over paired slices.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n, floor))
        .fold(0.0, f64::max)
}
