//! Invertible generalized Haar transform and its multi-scale composition.
//!
//! One scale splits a trajectory into its even and odd time steps and mixes
//! them with a scalar `alpha`:
//!
//! ```text
//! c = (1 - alpha) e + alpha o
//! f = o - c
//! ```
//!
//! The Jacobian is block diagonal with `d·T/2` blocks of determinant
//! `1 - alpha`, so the transform is invertible for `alpha` in `[0, 1)`.
//! Applying it recursively to the coarse part gives the pyramid
//! `[f_1, ..., f_K, c_K]`.

use std::fmt::Write as _;

use crate::diffcore::{Array, DiffError, Tape, Var};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum HaarError {
    #[error("trajectory length {len} is odd; the even/odd split needs an even length")]
    OddLength { len: usize },
    #[error("length {len} is not divisible by 2^{scales} = {required}")]
    Divisibility {
        len: usize,
        scales: usize,
        required: usize,
    },
    #[error("mixing parameter alpha = {0} is outside [0, 1)")]
    Alpha(f64),
    #[error("invalid trajectory: {0}")]
    Trajectory(String),
    #[error("inconsistent pyramid: {0}")]
    Structure(String),
}

/// A length-`T` sequence of `d`-dimensional positions with a fixed timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    points: Vec<f64>,
    dim: usize,
    dt: f64,
}

impl Trajectory {
    /// `points` is time-major: `T` rows of `dim` coordinates.
    pub fn new(points: Vec<f64>, dim: usize, dt: f64) -> Result<Self, HaarError> {
        if dim == 0 || points.is_empty() || points.len() % dim != 0 {
            return Err(HaarError::Trajectory(format!(
                "{} values cannot form points of dimension {dim}",
                points.len()
            )));
        }
        if let Some(i) = points.iter().position(|v| !v.is_finite()) {
            return Err(HaarError::Trajectory(format!(
                "non-finite coordinate at step {}",
                i / dim
            )));
        }
        Ok(Self { points, dim, dt })
    }

    /// Build from a list of points.
    pub fn from_points(points: &[Vec<f64>], dt: f64) -> Result<Self, HaarError> {
        let dim = points.first().map_or(0, Vec::len);
        if points.iter().any(|p| p.len() != dim) {
            return Err(HaarError::Trajectory("ragged point list".into()));
        }
        Self::new(points.concat(), dim, dt)
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn point(&self, t: usize) -> &[f64] {
        &self.points[t * self.dim..(t + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.points
    }

    pub fn last_point(&self) -> &[f64] {
        self.point(self.len() - 1)
    }

    fn with_values(&self, points: Vec<f64>, dt: f64) -> Self {
        Self {
            points,
            dim: self.dim,
            dt,
        }
    }

    /// Largest absolute coordinate difference to `other`.
    pub fn max_abs_diff(&self, other: &Trajectory) -> f64 {
        self.points
            .iter()
            .zip(&other.points)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Channel-major `[1, dim, T]` array for the batched model code.
    pub fn to_channel_major(&self) -> Array {
        let (t_len, d) = (self.len(), self.dim);
        let mut data = vec![0.0; t_len * d];
        for t in 0..t_len {
            for c in 0..d {
                data[c * t_len + t] = self.points[t * d + c];
            }
        }
        Array::new(vec![1, d, t_len], data).expect("shape")
    }

    /// Inverse of [`Trajectory::to_channel_major`] for batch row `row`.
    pub fn from_channel_major(a: &Array, row: usize, dt: f64) -> Result<Self, HaarError> {
        let s = a.shape();
        let (d, t_len) = (s[1], s[2]);
        let base = row * d * t_len;
        let mut pts = vec![0.0; d * t_len];
        for c in 0..d {
            for t in 0..t_len {
                pts[t * d + c] = a.data()[base + c * t_len + t];
            }
        }
        Self::new(pts, d, dt)
    }
}

/// Learnable mixing parameter, stored unconstrained.
///
/// The realized value `(1 - epsilon) · sigmoid(u)` stays in `[0, 1 - epsilon]`
/// so `log(1 - alpha)` remains finite during optimization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixParam {
    pub unconstrained: f64,
    pub epsilon: f64,
}

pub const DEFAULT_MIX_EPSILON: f64 = 1e-3;

impl MixParam {
    pub fn from_alpha(alpha: f64) -> Result<Self, HaarError> {
        let eps = DEFAULT_MIX_EPSILON;
        if !(0.0..1.0 - eps).contains(&alpha) {
            return Err(HaarError::Alpha(alpha));
        }
        let s = alpha / (1.0 - eps);
        // alpha == 0 maps to a large negative logit rather than -inf
        let s = s.max(1e-12);
        Ok(Self {
            unconstrained: (s / (1.0 - s)).ln(),
            epsilon: eps,
        })
    }

    pub fn alpha(&self) -> f64 {
        (1.0 - self.epsilon) / (1.0 + (-self.unconstrained).exp())
    }
}

impl Default for MixParam {
    fn default() -> Self {
        Self::from_alpha(0.5).expect("0.5 is a valid alpha")
    }
}

fn check_alpha(alpha: f64) -> Result<(), HaarError> {
    if (0.0..1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(HaarError::Alpha(alpha))
    }
}

/// Split into even steps `[y2, y4, ...]` and odd steps `[y1, y3, ...]` (1-based).
pub fn split_even_odd(y: &Trajectory) -> Result<(Trajectory, Trajectory), HaarError> {
    let n = y.len();
    if n % 2 != 0 {
        return Err(HaarError::OddLength { len: n });
    }
    let d = y.dim;
    let mut e = Vec::with_capacity(n / 2 * d);
    let mut o = Vec::with_capacity(n / 2 * d);
    for i in 0..n / 2 {
        o.extend_from_slice(y.point(2 * i));
        e.extend_from_slice(y.point(2 * i + 1));
    }
    Ok((y.with_values(e, 2.0 * y.dt), y.with_values(o, 2.0 * y.dt)))
}

/// Mix even and odd parts into `(fine, coarse)`.
pub fn haar_mix(
    e: &Trajectory,
    o: &Trajectory,
    alpha: f64,
) -> Result<(Trajectory, Trajectory), HaarError> {
    check_alpha(alpha)?;
    if e.len() != o.len() || e.dim != o.dim {
        return Err(HaarError::Structure(format!(
            "even part has {} steps, odd part {}",
            e.len(),
            o.len()
        )));
    }
    let c: Vec<f64> = e
        .points
        .iter()
        .zip(&o.points)
        .map(|(ev, ov)| (1.0 - alpha) * ev + alpha * ov)
        .collect();
    let f: Vec<f64> = o.points.iter().zip(&c).map(|(ov, cv)| ov - cv).collect();
    Ok((e.with_values(f, e.dt), e.with_values(c, e.dt)))
}

/// Output of one transform scale.
#[derive(Clone, Debug, PartialEq)]
pub struct HaarStep {
    pub fine: Trajectory,
    pub coarse: Trajectory,
    pub logdet: f64,
}

/// `log |det J|` of one scale acting on `len` steps of dimension `dim`.
pub fn scale_logdet(len: usize, dim: usize, alpha: f64) -> f64 {
    (dim * len) as f64 / 2.0 * (1.0 - alpha).ln()
}

pub fn f_hba_forward(y: &Trajectory, alpha: f64) -> Result<HaarStep, HaarError> {
    check_alpha(alpha)?;
    let (e, o) = split_even_odd(y)?;
    let (fine, coarse) = haar_mix(&e, &o, alpha)?;
    Ok(HaarStep {
        fine,
        coarse,
        logdet: scale_logdet(y.len(), y.dim, alpha),
    })
}

pub fn f_hba_inverse(fine: &Trajectory, coarse: &Trajectory, alpha: f64) -> Result<Trajectory, HaarError> {
    check_alpha(alpha)?;
    if fine.len() != coarse.len() || fine.dim != coarse.dim {
        return Err(HaarError::Structure(format!(
            "fine part has {} steps, coarse part {}",
            fine.len(),
            coarse.len()
        )));
    }
    let d = fine.dim;
    let mut y = Vec::with_capacity(2 * fine.points.len());
    for i in 0..fine.len() {
        let (f, c) = (fine.point(i), coarse.point(i));
        let o: Vec<f64> = f.iter().zip(c).map(|(f, c)| f + c).collect();
        let e: Vec<f64> = c.iter().zip(&o).map(|(c, o)| (c - alpha * o) / (1.0 - alpha)).collect();
        y.extend_from_slice(&o);
        y.extend_from_slice(&e);
    }
    debug_assert_eq!(y.len(), 2 * fine.len() * d);
    Ok(fine.with_values(y, fine.dt / 2.0))
}

/// Check that `scales` transform levels fit a sequence of length `len`.
///
/// Requires `2^scales | len`, which also bounds `scales ≤ log2(len)`.
pub fn check_scales(len: usize, scales: usize) -> Result<(), HaarError> {
    let required = 1usize.checked_shl(scales as u32).unwrap_or(usize::MAX);
    if scales == 0 || required > len || len % required != 0 {
        return Err(HaarError::Divisibility {
            len,
            scales,
            required,
        });
    }
    Ok(())
}

/// Length of the fine/coarse parts at 1-based scale `k` for input length `len`.
pub fn scale_len(len: usize, k: usize) -> usize {
    len >> k
}

/// Fine components of every scale plus the coarsest trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct HaarPyramid {
    pub fines: Vec<Trajectory>,
    pub coarsest: Trajectory,
    pub logdets: Vec<f64>,
    pub alphas: Vec<f64>,
}

impl HaarPyramid {
    pub fn scales(&self) -> usize {
        self.fines.len()
    }

    pub fn total_logdet(&self) -> f64 {
        self.logdets.iter().sum()
    }

    /// Key-value text dump, readable by [`HaarPyramid::from_text`].
    pub fn to_text(&self) -> String {
        let join = |t: &Trajectory| {
            t.values()
                .iter()
                .map(|v| format!("{v:?}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut s = String::new();
        let _ = writeln!(s, "scales={}", self.scales());
        let _ = writeln!(s, "dim={}", self.coarsest.dim());
        let _ = writeln!(s, "dt={:?}", self.fines[0].dt() / 2.0);
        for (k, f) in self.fines.iter().enumerate() {
            let _ = writeln!(s, "alpha_{}={:?}", k + 1, self.alphas[k]);
            let _ = writeln!(s, "logdet_{}={:?}", k + 1, self.logdets[k]);
            let _ = writeln!(s, "fine_{}={}", k + 1, join(f));
        }
        let _ = writeln!(s, "coarse_{}={}", self.scales(), join(&self.coarsest));
        let _ = writeln!(s, "total_logdet={:?}", self.total_logdet());
        s
    }

    pub fn from_text(text: &str) -> Result<Self, HaarError> {
        let mut map = std::collections::HashMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HaarError::Structure(format!("malformed line {line:?}")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            map.get(k)
                .ok_or_else(|| HaarError::Structure(format!("missing key {k}")))
        };
        let num = |k: &str| -> Result<f64, HaarError> {
            get(k)?
                .parse()
                .map_err(|_| HaarError::Structure(format!("bad number for {k}")))
        };
        let list = |k: &str| -> Result<Vec<f64>, HaarError> {
            get(k)?
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse()
                        .map_err(|_| HaarError::Structure(format!("bad number in {k}")))
                })
                .collect()
        };
        let scales = num("scales")? as usize;
        let dim = num("dim")? as usize;
        let dt = num("dt")?;
        let mut p = HaarPyramid {
            fines: Vec::new(),
            coarsest: Trajectory::new(list(&format!("coarse_{scales}"))?, dim, dt * (1 << scales) as f64)?,
            logdets: Vec::new(),
            alphas: Vec::new(),
        };
        for k in 1..=scales {
            p.fines.push(Trajectory::new(list(&format!("fine_{k}"))?, dim, dt * (1 << k) as f64)?);
            p.logdets.push(num(&format!("logdet_{k}"))?);
            p.alphas.push(num(&format!("alpha_{k}"))?);
        }
        Ok(p)
    }
}

/// Expand one shared alpha or validate per-scale alphas.
fn scale_alphas(alphas: &[f64], scales: usize) -> Result<Vec<f64>, HaarError> {
    match alphas.len() {
        1 => Ok(vec![alphas[0]; scales]),
        n if n == scales => Ok(alphas.to_vec()),
        n => Err(HaarError::Structure(format!(
            "{n} alphas given for {scales} scales"
        ))),
    }
}

/// Apply the single-scale transform recursively `scales` times.
///
/// `alphas` holds either one shared value or one value per scale.
pub fn decompose(y: &Trajectory, scales: usize, alphas: &[f64]) -> Result<HaarPyramid, HaarError> {
    check_scales(y.len(), scales)?;
    let alphas = scale_alphas(alphas, scales)?;
    let mut current = y.clone();
    let mut fines = Vec::with_capacity(scales);
    let mut logdets = Vec::with_capacity(scales);
    for &a in &alphas {
        let step = f_hba_forward(&current, a)?;
        fines.push(step.fine);
        logdets.push(step.logdet);
        current = step.coarse;
    }
    Ok(HaarPyramid {
        fines,
        coarsest: current,
        logdets,
        alphas,
    })
}

/// Invert [`decompose`], from the coarsest scale upward.
pub fn reconstruct(p: &HaarPyramid) -> Result<Trajectory, HaarError> {
    let k = p.fines.len();
    if k == 0 || p.alphas.len() != k {
        return Err(HaarError::Structure(format!(
            "{k} fine components with {} alphas",
            p.alphas.len()
        )));
    }
    let mut current = p.coarsest.clone();
    for (i, fine) in p.fines.iter().enumerate().rev() {
        if fine.len() != current.len() || fine.dim() != current.dim() {
            return Err(HaarError::Structure(format!(
                "scale {} fine part has {} steps but the coarse input has {}",
                i + 1,
                fine.len(),
                current.len()
            )));
        }
        current = f_hba_inverse(fine, &current, p.alphas[i])?;
    }
    Ok(current)
}

/// Batched forward on channel-major `[batch, dim, T]` arrays.
pub fn forward_batched(y: &Array, alpha: f64) -> Result<(Array, Array), HaarError> {
    check_alpha(alpha)?;
    let s = y.shape();
    let t_len = s[2];
    if t_len % 2 != 0 {
        return Err(HaarError::OddLength { len: t_len });
    }
    let rows = s[0] * s[1];
    let half = t_len / 2;
    let mut f = vec![0.0; rows * half];
    let mut c = vec![0.0; rows * half];
    for r in 0..rows {
        for i in 0..half {
            let o = y.data()[r * t_len + 2 * i];
            let e = y.data()[r * t_len + 2 * i + 1];
            let cv = (1.0 - alpha) * e + alpha * o;
            c[r * half + i] = cv;
            f[r * half + i] = o - cv;
        }
    }
    let shape = vec![s[0], s[1], half];
    Ok((
        Array::new(shape.clone(), f).expect("shape"),
        Array::new(shape, c).expect("shape"),
    ))
}

/// Batched inverse on channel-major `[batch, dim, T/2]` arrays.
pub fn inverse_batched(fine: &Array, coarse: &Array, alpha: f64) -> Result<Array, HaarError> {
    check_alpha(alpha)?;
    if fine.shape() != coarse.shape() {
        return Err(HaarError::Structure(format!(
            "fine shape {:?} differs from coarse shape {:?}",
            fine.shape(),
            coarse.shape()
        )));
    }
    let s = fine.shape();
    let half = s[2];
    let rows = s[0] * s[1];
    let mut y = vec![0.0; rows * 2 * half];
    for r in 0..rows {
        for i in 0..half {
            let f = fine.data()[r * half + i];
            let c = coarse.data()[r * half + i];
            let o = f + c;
            y[r * 2 * half + 2 * i] = o;
            y[r * 2 * half + 2 * i + 1] = (c - alpha * o) / (1.0 - alpha);
        }
    }
    Ok(Array::new(vec![s[0], s[1], 2 * half], y).expect("shape"))
}

/// Differentiable single scale on a `[batch, dim, T]` tape node.
///
/// `alpha` is a `[1]` node; returns `(fine, coarse)`.
pub fn forward_on_tape(tape: &mut Tape, y: Var, alpha: Var) -> Result<(Var, Var), DiffError> {
    let t_len = tape.shape(y)[2];
    if t_len % 2 != 0 {
        return Err(DiffError::Contract(format!(
            "Haar split needs an even length, got {t_len}"
        )));
    }
    let odd = tape.slice(y, 2, 0, 2, t_len / 2)?;
    let even = tape.slice(y, 2, 1, 2, t_len / 2)?;
    // c = e + alpha (o - e)
    let diff = tape.sub(odd, even)?;
    let mixed = tape.mul(diff, alpha)?;
    let coarse = tape.add(even, mixed)?;
    let fine = tape.sub(odd, coarse)?;
    Ok((fine, coarse))
}

/// Differentiable `log |det J|` of a scale acting on `len` steps: `[1]` node.
pub fn logdet_on_tape(tape: &mut Tape, alpha: Var, len: usize, dim: usize) -> Var {
    let one_minus = tape.neg(alpha);
    let one_minus = tape.add_scalar(one_minus, 1.0);
    let l = tape.log(one_minus);
    tape.scale(l, (dim * len) as f64 / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj1(v: &[f64]) -> Trajectory {
        Trajectory::new(v.to_vec(), 1, 1.0).unwrap()
    }

    #[test]
    fn split_examples() {
        let (e, o) = split_even_odd(&traj1(&[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(e.values(), &[2.0, 4.0]);
        assert_eq!(o.values(), &[1.0, 3.0]);
        let (e, o) = split_even_odd(&traj1(&[7.0, 9.0])).unwrap();
        assert_eq!((e.values(), o.values()), (&[9.0][..], &[7.0][..]));
        assert_eq!(
            split_even_odd(&traj1(&[1.0, 2.0, 3.0])),
            Err(HaarError::OddLength { len: 3 })
        );
    }

    #[test]
    fn mix_examples() {
        let (f, c) = haar_mix(&traj1(&[2.0, 4.0]), &traj1(&[1.0, 3.0]), 0.5).unwrap();
        assert_eq!(c.values(), &[1.5, 3.5]);
        assert_eq!(f.values(), &[-0.5, -0.5]);

        let e = traj1(&[0.3, -1.2]);
        let o = traj1(&[2.5, 0.7]);
        let (f, c) = haar_mix(&e, &o, 0.0).unwrap();
        assert_eq!(c.values(), e.values());
        assert_eq!(f.values(), &[2.5 - 0.3, 0.7 + 1.2]);
        for (i, (fv, cv)) in f.values().iter().zip(c.values()).enumerate() {
            assert_eq!(fv + cv, o.values()[i]);
        }
        assert_eq!(haar_mix(&e, &o, 1.0), Err(HaarError::Alpha(1.0)));
        assert_eq!(haar_mix(&e, &o, -0.1), Err(HaarError::Alpha(-0.1)));
    }

    #[test]
    fn forward_examples() {
        let s = f_hba_forward(&traj1(&[1.0, 2.0, 3.0, 4.0]), 0.5).unwrap();
        assert_eq!(s.fine.values(), &[-0.5, -0.5]);
        assert_eq!(s.coarse.values(), &[1.5, 3.5]);
        assert!((s.logdet - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        assert!((s.logdet + 1.3863).abs() < 1e-4);

        let s = f_hba_forward(&traj1(&[0.1, 5.0, -3.0, 2.0]), 0.0).unwrap();
        assert_eq!(s.logdet, 0.0);

        let y2 = Trajectory::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], 2, 1.0).unwrap();
        let s = f_hba_forward(&y2, 0.5).unwrap();
        assert!((s.logdet - 4.0 * 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn inverse_examples() {
        let y = f_hba_inverse(&traj1(&[-0.5, -0.5]), &traj1(&[1.5, 3.5]), 0.5).unwrap();
        assert_eq!(y.values(), &[1.0, 2.0, 3.0, 4.0]);
        let y = f_hba_inverse(&traj1(&[0.0, 0.0]), &traj1(&[2.0, -1.0]), 0.0).unwrap();
        assert_eq!(y.values(), &[2.0, 2.0, -1.0, -1.0]);
        assert!(f_hba_inverse(&traj1(&[0.0]), &traj1(&[0.0]), 1.0).is_err());
        assert!(f_hba_inverse(&traj1(&[0.0]), &traj1(&[0.0]), -0.5).is_err());
    }

    #[test]
    fn decompose_two_scales() {
        let p = decompose(&traj1(&[1.0, 2.0, 3.0, 4.0]), 2, &[0.5]).unwrap();
        assert_eq!(p.fines[0].values(), &[-0.5, -0.5]);
        assert_eq!(p.fines[1].values(), &[-1.0]);
        assert_eq!(p.coarsest.values(), &[2.5]);
        assert!((p.total_logdet() - 3.0 * 0.5f64.ln()).abs() < 1e-12);
        assert!((p.total_logdet() + 2.0794).abs() < 1e-4);
        assert_eq!(reconstruct(&p).unwrap().values(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn scale_count_limits() {
        let y = traj1(&[0.0; 8]);
        for k in 1..=3 {
            assert!(decompose(&y, k, &[0.5]).is_ok());
        }
        assert!(matches!(
            decompose(&y, 4, &[0.5]),
            Err(HaarError::Divisibility { len: 8, scales: 4, required: 16 })
        ));
        assert!(decompose(&traj1(&[0.0; 12]), 3, &[0.5]).is_err());
        assert!(decompose(&traj1(&[0.0; 12]), 2, &[0.5]).is_ok());
    }

    #[test]
    fn single_scale_matches_forward() {
        let y = traj1(&[0.3, -1.0, 2.2, 0.9, 4.0, 1.5]);
        let p = decompose(&y, 1, &[0.3]).unwrap();
        let s = f_hba_forward(&y, 0.3).unwrap();
        assert_eq!(p.fines[0], s.fine);
        assert_eq!(p.coarsest, s.coarse);
        assert_eq!(p.logdets[0], s.logdet);
    }

    #[test]
    fn zero_pyramid_reconstructs_to_zero() {
        let z = traj1(&[0.0; 2]);
        let p = HaarPyramid {
            fines: vec![z.clone(), traj1(&[0.0])],
            coarsest: traj1(&[0.0]),
            logdets: vec![0.0, 0.0],
            alphas: vec![0.0, 0.0],
        };
        assert_eq!(reconstruct(&p).unwrap().values(), &[0.0; 4]);
    }

    #[test]
    fn reconstruct_rejects_bad_shapes() {
        let p = HaarPyramid {
            fines: vec![traj1(&[0.0; 3])],
            coarsest: traj1(&[0.0]),
            logdets: vec![0.0],
            alphas: vec![0.5],
        };
        assert!(matches!(reconstruct(&p), Err(HaarError::Structure(_))));
    }

    #[test]
    fn text_dump_roundtrip() {
        let y = Trajectory::new((0..16).map(|i| (i as f64 * 0.7).sin()).collect(), 2, 0.25).unwrap();
        let p = decompose(&y, 2, &[0.5, 0.3]).unwrap();
        let q = HaarPyramid::from_text(&p.to_text()).unwrap();
        assert_eq!(p, q);
        assert!(reconstruct(&q).unwrap().max_abs_diff(&y) < 1e-12);
    }

    #[test]
    fn mix_param_range() {
        let m = MixParam::default();
        assert!((m.alpha() - 0.5).abs() < 1e-12);
        let lo = MixParam { unconstrained: -1e3, epsilon: 1e-3 };
        let hi = MixParam { unconstrained: 1e3, epsilon: 1e-3 };
        assert!(lo.alpha() >= 0.0);
        assert!(hi.alpha() <= 1.0 - 1e-3);
        assert!(MixParam::from_alpha(1.0).is_err());
    }

    #[test]
    fn batched_matches_trajectory_api() {
        let y = Trajectory::new((0..16).map(|i| (i as f64).cos() * 3.0).collect(), 2, 1.0).unwrap();
        let s = f_hba_forward(&y, 0.37).unwrap();
        let (f, c) = forward_batched(&y.to_channel_major(), 0.37).unwrap();
        assert_eq!(Trajectory::from_channel_major(&f, 0, 2.0).unwrap(), s.fine);
        assert_eq!(Trajectory::from_channel_major(&c, 0, 2.0).unwrap(), s.coarse);
        let back = inverse_batched(&f, &c, 0.37).unwrap();
        assert!(Trajectory::from_channel_major(&back, 0, 1.0).unwrap().max_abs_diff(&y) < 1e-12);
    }

    #[test]
    fn tape_matches_batched() {
        let y = Trajectory::new((0..8).map(|i| (i as f64 * 1.3).sin()).collect(), 2, 1.0).unwrap();
        let a = y.to_channel_major();
        let mut tape = Tape::new();
        let yv = tape.constant(a.clone());
        let al = tape.constant(Array::scalar(0.42));
        let (f, c) = forward_on_tape(&mut tape, yv, al).unwrap();
        let (fb, cb) = forward_batched(&a, 0.42).unwrap();
        for (x, y) in tape.value(f).data().iter().zip(fb.data()) {
            assert!((x - y).abs() < 1e-15);
        }
        for (x, y) in tape.value(c).data().iter().zip(cb.data()) {
            assert!((x - y).abs() < 1e-15);
        }
        let ld = logdet_on_tape(&mut tape, al, 4, 2);
        assert!((tape.value(ld).item() - scale_logdet(4, 2, 0.42)).abs() < 1e-14);
    }
}
