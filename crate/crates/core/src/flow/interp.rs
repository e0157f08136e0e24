//! Morph schedule and spherical interpolation of initial noise.

use crate::attention::BlendWeight;
use crate::error::{Error, Result};

/// Angle below which [`slerp`] falls back to linear interpolation.
pub const SLERP_LINEAR_THRESHOLD: f64 = 1e-4;

/// Linearly spaced weights `n / N` for `n = 0..=N`.
pub fn alpha_schedule(steps: usize) -> Result<Vec<BlendWeight>> {
    if steps == 0 {
        return Err(Error::invalid("frame step count N must be at least 1"));
    }
    (0..=steps)
        .map(|n| {
            let a = if n == steps {
                1.0
            } else {
                n as f64 / steps as f64
            };
            BlendWeight::new(a)
        })
        .collect()
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Spherical interpolation between two flat vectors.
///
/// Returns exact copies of the endpoints at `α = 0` and `α = 1`, and of
/// `x0` when both inputs are identical.
pub fn slerp(x0: &[f64], x1: &[f64], alpha: BlendWeight) -> Result<Vec<f64>> {
    if x0.len() != x1.len() {
        return Err(Error::Shape {
            what: "slerp operands",
            expected: x0.len(),
            found: x1.len(),
        });
    }
    let (n0, n1) = (norm(x0), norm(x1));
    if n0 == 0.0 || n1 == 0.0 {
        return Err(Error::invalid("slerp of a zero-norm vector"));
    }
    let a = alpha.value();
    if a == 0.0 {
        return Ok(x0.to_vec());
    }
    if a == 1.0 || x0 == x1 {
        return Ok(x1.to_vec());
    }
    let dot: f64 = x0.iter().zip(x1).map(|(p, q)| p * q).sum();
    let theta = (dot / (n0 * n1)).clamp(-1.0, 1.0).acos();
    if theta < SLERP_LINEAR_THRESHOLD {
        return Ok(x0
            .iter()
            .zip(x1)
            .map(|(p, q)| (1.0 - a) * p + a * q)
            .collect());
    }
    let s = theta.sin();
    if s < 1e-12 {
        return Err(Error::invalid(
            "slerp between antipodal vectors is undefined",
        ));
    }
    let w0 = ((1.0 - a) * theta).sin() / s;
    let w1 = (a * theta).sin() / s;
    Ok(x0.iter().zip(x1).map(|(p, q)| w0 * p + w1 * q).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(v: f64) -> BlendWeight {
        BlendWeight::new(v).unwrap()
    }

    #[test]
    fn schedule_values() {
        let s = alpha_schedule(49).unwrap();
        assert_eq!(s.len(), 50);
        assert_eq!(s[0].value(), 0.0);
        assert_eq!(s[49].value(), 1.0);
        assert!(s.windows(2).all(|p| p[0] < p[1]));
        let v: Vec<f64> = alpha_schedule(4)
            .unwrap()
            .iter()
            .map(|a| a.value())
            .collect();
        assert_eq!(v, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(
            alpha_schedule(1).unwrap(),
            vec![BlendWeight::ZERO, BlendWeight::ONE]
        );
        assert!(alpha_schedule(0).is_err());
    }

    #[test]
    fn slerp_orthogonal_midpoint() {
        let out = slerp(&[1.0, 0.0], &[0.0, 1.0], w(0.5)).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((out[0] - h).abs() < 1e-12 && (out[1] - h).abs() < 1e-12);
        assert!((norm(&out) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn slerp_endpoints_and_errors() {
        let a = [0.3, -1.2, 2.0];
        let b = [1.0, 0.5, -0.1];
        assert_eq!(slerp(&a, &b, w(0.0)).unwrap(), a.to_vec());
        assert_eq!(slerp(&a, &b, w(1.0)).unwrap(), b.to_vec());
        assert!(slerp(&a, &[0.0; 3], w(0.5)).is_err());
        assert!(slerp(&a, &[1.0], w(0.5)).is_err());
    }
}
