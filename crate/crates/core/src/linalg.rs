//! Dense vector helpers shared by the descriptor, encoder and index code.

use alloc::vec::Vec;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a))
}

/// Returns `a / ‖a‖₂`, or `None` when the norm is zero or not finite.
pub fn normalized(a: &[f64]) -> Option<Vec<f64>> {
    let n = norm(a);
    if n > 0.0 && n.is_finite() {
        Some(a.iter().map(|x| x / n).collect())
    } else {
        None
    }
}

/// `y = W x + b` for a row-major `W` with `b.len()` rows.
pub fn affine(w: &[f64], b: &[f64], x: &[f64], y: &mut [f64]) {
    let cols = x.len();
    for (r, out) in y.iter_mut().enumerate() {
        *out = b[r] + dot(&w[r * cols..(r + 1) * cols], x);
    }
}

/// Evenly spaced grid of `steps` points over `[start, end]`.
pub fn linspace(start: f64, end: f64, steps: usize) -> Vec<f64> {
    match steps {
        0 => Vec::new(),
        1 => alloc::vec![start],
        _ => (0..steps)
            .map(|i| start + (end - start) * (i as f64) / ((steps - 1) as f64))
            .collect(),
    }
}
