use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

/// Marker threshold for significance annotations.
pub const SIGNIFICANCE_LEVEL: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sided {
    /// H1: accuracy a > accuracy b.
    #[default]
    OneSided,
    TwoSided,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ZTestError {
    #[error("sample sizes must be >= 1")]
    EmptySample,
    #[error("accuracy {0} outside [0, 1]")]
    BadAccuracy(f64),
    #[error("pooled proportion {0} has zero variance")]
    Degenerate(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZTest {
    pub z: f64,
    pub p_value: f64,
    pub sided: Sided,
}

impl ZTest {
    pub fn significant(&self) -> bool {
        self.p_value < SIGNIFICANCE_LEVEL
    }

    pub fn marker(&self) -> Option<&'static str> {
        self.significant().then_some("*")
    }
}

/// Pooled two-proportion z-test of `acc_a` (n_a trials) against `acc_b`.
pub fn two_proportion_z_test(acc_a: f64, n_a: usize, acc_b: f64, n_b: usize, sided: Sided) -> Result<ZTest, ZTestError> {
    if n_a == 0 || n_b == 0 {
        return Err(ZTestError::EmptySample);
    }
    for a in [acc_a, acc_b] {
        if !(0.0..=1.0).contains(&a) {
            return Err(ZTestError::BadAccuracy(a));
        }
    }
    let (na, nb) = (n_a as f64, n_b as f64);
    let pooled = (acc_a * na + acc_b * nb) / (na + nb);
    let var = pooled * (1.0 - pooled) * (1.0 / na + 1.0 / nb);
    if var <= 0.0 {
        return Err(ZTestError::Degenerate(pooled));
    }
    let z = (acc_a - acc_b) / var.sqrt();
    let normal = Normal::standard();
    let p_value = match sided {
        Sided::OneSided => normal.sf(z),
        Sided::TwoSided => (2.0 * normal.sf(z.abs())).min(1.0),
    };
    Ok(ZTest { z, p_value, sided })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_and_antisymmetric() {
        let t = two_proportion_z_test(0.7, 50, 0.7, 80, Sided::TwoSided).unwrap();
        assert_eq!((t.z, t.p_value), (0.0, 1.0));
        let a = two_proportion_z_test(0.6, 100, 0.5, 120, Sided::TwoSided).unwrap();
        let b = two_proportion_z_test(0.5, 120, 0.6, 100, Sided::TwoSided).unwrap();
        assert!((a.z + b.z).abs() < 1e-12 && (a.p_value - b.p_value).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert_eq!(two_proportion_z_test(1.0, 10, 1.0, 10, Sided::OneSided), Err(ZTestError::Degenerate(1.0)));
        assert_eq!(two_proportion_z_test(0.5, 0, 0.5, 10, Sided::OneSided), Err(ZTestError::EmptySample));
        assert!(two_proportion_z_test(1.5, 10, 0.5, 10, Sided::OneSided).is_err());
    }
}
