use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub dof: f64,
    /// Two-sided p-value.
    pub p_value: f64,
}

/// Paired two-sided t-test on per-case scores.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidValue(format!(
            "paired test needs two equal-length samples of at least 2 (got {} and {})",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let dof = n - 1.0;
    if var == 0.0 {
        let p = if mean == 0.0 { 1.0 } else { 0.0 };
        return Ok(TTest { t: if mean == 0.0 { 0.0 } else { mean.signum() * f64::INFINITY }, dof, p_value: p });
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, dof).map_err(|e| Error::InvalidValue(e.to_string()))?;
    Ok(TTest { t, dof, p_value: 2.0 * dist.sf(t.abs()) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_value() {
        // Differences 1, 2, 3, 4: mean 2.5, sd 1.29099, t = 3.87298 on 3 dof.
        let r = paired_t_test(&[2.0, 4.0, 6.0, 8.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((r.t - 3.872983346207417).abs() < 1e-9);
        assert!((r.p_value - 0.030466).abs() < 1e-5);
        assert_eq!(paired_t_test(&[1.0, 2.0], &[1.0, 2.0]).unwrap().p_value, 1.0);
        assert!(paired_t_test(&[1.0], &[1.0]).is_err());
    }
}
