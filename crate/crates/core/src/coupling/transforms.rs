//! Elementwise invertible transforms used inside coupling steps.
//!
//! Each transform has an `f64` path (used for inversion and sampling) and a
//! tape path (used for differentiable likelihoods). Both take the raw
//! conditioner outputs, so the parameter realization is shared.

use super::cubic;
use super::CouplingError;
use crate::diffcore::{DiffError, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Which elementwise map a coupling step applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransformKind {
    Affine,
    Nlsq,
}

impl TransformKind {
    /// Raw parameters per transformed element.
    pub fn param_count(self) -> usize {
        match self {
            TransformKind::Affine => 2,
            TransformKind::Nlsq => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::Affine => "affine",
            TransformKind::Nlsq => "nlsq",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "affine" => Some(TransformKind::Affine),
            "nlsq" => Some(TransformKind::Nlsq),
            _ => None,
        }
    }
}

/// Affine map `l' = l·exp(s) + t`, elementwise.
///
/// Returns the transformed values and the summed log-determinant (negated
/// for the inverse direction).
pub fn affine_transform(
    l: &[f64],
    s: &[f64],
    t: &[f64],
    direction: Direction,
) -> Result<(Vec<f64>, f64), CouplingError> {
    if l.len() != s.len() || l.len() != t.len() {
        return Err(CouplingError::Length(format!(
            "affine inputs have lengths {}, {}, {}",
            l.len(),
            s.len(),
            t.len()
        )));
    }
    if let Some(bad) = s.iter().find(|v| !v.is_finite()) {
        return Err(CouplingError::Numeric(format!("non-finite affine log-scale {bad}")));
    }
    let out = match direction {
        Direction::Forward => l.iter().zip(s).zip(t).map(|((l, s), t)| l * s.exp() + t).collect(),
        Direction::Inverse => l.iter().zip(s).zip(t).map(|((l, s), t)| (l - t) * (-s).exp()).collect(),
    };
    let ld: f64 = s.iter().sum();
    Ok((out, if direction == Direction::Forward { ld } else { -ld }))
}

/// Fraction of the monotonicity bound used for the NLSq bump amplitude.
pub const NLSQ_SAFETY: f64 = 0.95;

/// `8√3/9`: the bump amplitude bound (relative to `b/d`) that keeps the
/// NLSq map strictly increasing.
pub fn nlsq_bound() -> f64 {
    8.0 * 3f64.sqrt() / 9.0
}

/// Realized NLSq parameters for one element.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Nlsq {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub g: f64,
}

impl Nlsq {
    /// Realize from raw outputs `(a, b̂, ĉ, d̂, g)`.
    pub fn from_raw(a: f64, b_hat: f64, c_hat: f64, d_hat: f64, g: f64) -> Self {
        let b = b_hat.exp();
        let d = d_hat.exp();
        let c = NLSQ_SAFETY * nlsq_bound() * (b / d) * c_hat.tanh();
        Self { a, b, c, d, g }
    }

    pub fn forward(&self, l: f64) -> f64 {
        let u = self.d * l + self.g;
        self.a + self.b * l + self.c / (1.0 + u * u)
    }

    pub fn derivative(&self, l: f64) -> f64 {
        let u = self.d * l + self.g;
        let q = 1.0 + u * u;
        self.b - 2.0 * self.c * self.d * u / (q * q)
    }

    /// Solve `forward(l) = y` through the implied cubic in `u = d·l + g`,
    /// then polish with one Newton step on the original map.
    pub fn inverse(&self, y: f64) -> Result<f64, CouplingError> {
        let k = self.b / self.d;
        let w = y - self.a + k * self.g;
        // k u³ - w u² + k u - (w - c) = 0
        let roots = cubic::real_roots(k, -w, k, -(w - self.c));
        let mut best = f64::NAN;
        let mut best_res = f64::INFINITY;
        for u in roots {
            let l = (u - self.g) / self.d;
            let res = (self.forward(l) - y).abs();
            if res < best_res {
                best_res = res;
                best = l;
            }
        }
        let l = best - (self.forward(best) - y) / self.derivative(best);
        let res = (self.forward(l) - y).abs();
        if !(res <= 1e-9) {
            return Err(CouplingError::Numeric(format!(
                "NLSq inverse residual {res:e} at y = {y} ({self:?})"
            )));
        }
        Ok(l)
    }
}

/// NLSq map `l' = a + b·l + c / (1 + (d·l + g)²)` on slices of raw parameters.
pub fn nlsq_transform(
    l: &[f64],
    raw: [&[f64]; 5],
    direction: Direction,
) -> Result<(Vec<f64>, f64), CouplingError> {
    if raw.iter().any(|r| r.len() != l.len()) {
        return Err(CouplingError::Length("NLSq parameter lengths differ from input".into()));
    }
    let mut out = Vec::with_capacity(l.len());
    let mut ld = 0.0;
    for (i, &v) in l.iter().enumerate() {
        let p = Nlsq::from_raw(raw[0][i], raw[1][i], raw[2][i], raw[3][i], raw[4][i]);
        match direction {
            Direction::Forward => {
                out.push(p.forward(v));
                ld += p.derivative(v).ln();
            }
            Direction::Inverse => {
                let x = p.inverse(v)?;
                ld -= p.derivative(x).ln();
                out.push(x);
            }
        }
    }
    Ok((out, ld))
}

/// Apply `kind` elementwise given raw per-element parameter slices.
pub fn apply(
    kind: TransformKind,
    l: &[f64],
    raw: &[&[f64]],
    direction: Direction,
) -> Result<(Vec<f64>, f64), CouplingError> {
    match kind {
        TransformKind::Affine => affine_transform(l, raw[0], raw[1], direction),
        TransformKind::Nlsq => nlsq_transform(l, [raw[0], raw[1], raw[2], raw[3], raw[4]], direction),
    }
}

/// Differentiable forward map. Returns `(l', per-element log-derivative)`.
pub fn forward_on_tape(
    tape: &mut Tape,
    kind: TransformKind,
    l: Var,
    raw: &[Var],
) -> Result<(Var, Var), DiffError> {
    match kind {
        TransformKind::Affine => {
            let (s, t) = (raw[0], raw[1]);
            let scale = tape.exp(s);
            let scaled = tape.mul(l, scale)?;
            Ok((tape.add(scaled, t)?, s))
        }
        TransformKind::Nlsq => {
            let (a, b_hat, c_hat, d_hat, g) = (raw[0], raw[1], raw[2], raw[3], raw[4]);
            let b = tape.exp(b_hat);
            let d = tape.exp(d_hat);
            let ratio = tape.div(b, d)?;
            let th = tape.tanh(c_hat);
            let c = tape.mul(ratio, th)?;
            let c = tape.scale(c, NLSQ_SAFETY * nlsq_bound());
            let dl = tape.mul(d, l)?;
            let u = tape.add(dl, g)?;
            let u2 = tape.square(u);
            let q = tape.add_scalar(u2, 1.0);
            let bump = tape.div(c, q)?;
            let bl = tape.mul(b, l)?;
            let lin = tape.add(a, bl)?;
            let out = tape.add(lin, bump)?;
            // derivative b - 2 c d u / q²
            let q2 = tape.square(q);
            let cd = tape.mul(c, d)?;
            let cdu = tape.mul(cd, u)?;
            let frac = tape.div(cdu, q2)?;
            let frac = tape.scale(frac, 2.0);
            let deriv = tape.sub(b, frac)?;
            Ok((out, tape.log(deriv)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_examples() {
        let (y, ld) = affine_transform(&[0.3, -2.0], &[0.0, 0.0], &[0.0, 0.0], Direction::Forward).unwrap();
        assert_eq!((y, ld), (vec![0.3, -2.0], 0.0));
        let (y, ld) = affine_transform(&[1.0], &[2f64.ln()], &[1.0], Direction::Forward).unwrap();
        assert!((y[0] - 3.0).abs() < 1e-15);
        assert!((ld - 2f64.ln()).abs() < 1e-15);
        let (back, ldi) = affine_transform(&y, &[2f64.ln()], &[1.0], Direction::Inverse).unwrap();
        assert!((back[0] - 1.0).abs() < 1e-15);
        assert!((ldi + ld).abs() < 1e-15);
        assert!(matches!(
            affine_transform(&[1.0], &[f64::NAN], &[0.0], Direction::Forward),
            Err(CouplingError::Numeric(_))
        ));
    }

    #[test]
    fn nlsq_collapses_to_affine_without_bump() {
        let p = Nlsq::from_raw(0.7, 0.4, 0.0, -0.3, 1.1);
        assert_eq!(p.c, 0.0);
        for l in [-3.0, 0.0, 2.5] {
            assert!((p.forward(l) - (0.7 + 0.4f64.exp() * l)).abs() < 1e-14);
        }
    }

    #[test]
    fn nlsq_identity_parameters() {
        let z = [0.0; 3];
        let (y, ld) = nlsq_transform(&[1.0, -2.0, 0.5], [&z, &z, &z, &z, &z], Direction::Forward).unwrap();
        assert_eq!(y, vec![1.0, -2.0, 0.5]);
        assert_eq!(ld, 0.0);
    }

    #[test]
    fn nlsq_is_monotone_at_the_bound() {
        // c_hat large: tanh -> 1, amplitude near the bound
        let p = Nlsq::from_raw(0.0, 0.0, 20.0, 1.5, -0.4);
        let mut prev = f64::NEG_INFINITY;
        for i in -4000..4000 {
            let l = i as f64 * 1e-3;
            assert!(p.derivative(l) > 0.0);
            let y = p.forward(l);
            assert!(y > prev);
            prev = y;
        }
    }

    #[test]
    fn nlsq_inverse_near_the_bump() {
        let p = Nlsq::from_raw(0.2, -0.5, 5.0, 2.0, 0.3);
        for i in -200..200 {
            let l = i as f64 * 0.01;
            let back = p.inverse(p.forward(l)).unwrap();
            assert!((back - l).abs() < 1e-9, "l={l} back={back}");
        }
    }
}
