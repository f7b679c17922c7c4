//! Closed-form real roots of cubic polynomials.

use std::f64::consts::PI;

/// Real roots of `a3 u³ + a2 u² + a1 u + a0 = 0` with `a3 != 0`, ascending.
///
/// Uses the depressed-cubic discriminant: one real root via a
/// cancellation-free Cardano form, three via the trigonometric form.
pub fn real_roots(a3: f64, a2: f64, a1: f64, a0: f64) -> Vec<f64> {
    debug_assert!(a3 != 0.0);
    let (b, c, d) = (a2 / a3, a1 / a3, a0 / a3);
    // u = t - b/3  ->  t³ + p t + q = 0
    let shift = b / 3.0;
    let p = c - b * b / 3.0;
    let q = 2.0 * b * b * b / 27.0 - b * c / 3.0 + d;
    let disc = (q / 2.0).powi(2) + (p / 3.0).powi(3);
    let mut roots = if disc > 0.0 {
        let a = -q.signum() * (q.abs() / 2.0 + disc.sqrt()).cbrt();
        let bb = if a != 0.0 { -p / (3.0 * a) } else { 0.0 };
        vec![a + bb]
    } else if p == 0.0 {
        vec![(-q).cbrt()]
    } else {
        let m = 2.0 * (-p / 3.0).sqrt();
        let arg = (3.0 * q / (p * m)).clamp(-1.0, 1.0);
        let phi = arg.acos() / 3.0;
        (0..3).map(|k| m * (phi - 2.0 * PI * k as f64 / 3.0).cos()).collect()
    };
    for r in &mut roots {
        *r -= shift;
    }
    roots.sort_by(|x, y| x.partial_cmp(y).unwrap());
    roots
}
