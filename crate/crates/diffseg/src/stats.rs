use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::statistics::Statistics;

use crate::error::{Error, Result};

/// Sample mean and two-sided Student-t confidence half-width.
pub fn mean_ci(values: &[f64], confidence: f64) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::Config(format!("a confidence interval needs at least 2 values, got {}", values.len())));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::Config(format!("confidence {confidence} outside (0, 1)")));
    }
    let n = values.len() as f64;
    let mean = values.mean();
    let sd = values.std_dev();
    let t = StudentsT::new(0.0, 1.0, n - 1.0)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.5 + confidence / 2.0);
    Ok((mean, t * sd / n.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_values_have_zero_width() {
        let (m, h) = mean_ci(&[3.0, 3.0, 3.0], 0.9).unwrap();
        assert_eq!(m, 3.0);
        assert_eq!(h, 0.0);
    }

    #[test]
    fn rejects_single_value() {
        assert!(mean_ci(&[1.0], 0.9).is_err());
        assert!(mean_ci(&[1.0, 2.0], 1.0).is_err());
    }
}
