//! Central finite-difference checks of analytic parameter gradients.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradientSample {
    pub tensor: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradientSample {
    /// `|a - n| / max(|a|, |n|, floor)`.
    pub fn relative_error(&self, floor: f64) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(floor);
        (self.analytic - self.numeric).abs() / scale
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub samples: Vec<GradientSample>,
    pub floor: f64,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.samples
            .iter()
            .map(|s| s.relative_error(self.floor))
            .fold(0.0, f64::max)
    }
}

/// Compares `analytic` against `(f(θ + h e) - f(θ - h e)) / 2h` at `count`
/// randomly chosen coordinates. Tensors are sampled round-robin in random
/// order so every parameter group is represented, elements uniformly within.
///
/// `f` must be deterministic in the parameters (fix any noise it draws).
pub fn check_gradients<R: Rng + ?Sized>(
    params: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    mut f: impl FnMut(&[Tensor<f64>]) -> Result<f64>,
    count: usize,
    step: f64,
    floor: f64,
    rng: &mut R,
) -> Result<GradCheckReport> {
    assert_eq!(params.len(), analytic.len());
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut tensors: Vec<usize> = (0..params.len()).filter(|&i| !params[i].is_empty()).collect();
    let mut samples = Vec::with_capacity(count);
    let mut k = 0;
    while samples.len() < count && !tensors.is_empty() {
        if k % tensors.len() == 0 {
            rand::seq::SliceRandom::shuffle(&mut tensors[..], rng);
        }
        let ti = tensors[k % tensors.len()];
        k += 1;
        let element = rng.random_range(0..params[ti].len());
        let orig = params[ti].data()[element];
        work[ti].data_mut()[element] = orig + step;
        let plus = f(&work)?;
        work[ti].data_mut()[element] = orig - step;
        let minus = f(&work)?;
        work[ti].data_mut()[element] = orig;
        samples.push(GradientSample {
            tensor: ti,
            element,
            analytic: analytic[ti].data()[element],
            numeric: (plus - minus) / (2.0 * step),
        });
    }
    Ok(GradCheckReport { samples, floor })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::SeedableRng;

    #[test]
    fn quadratic_passes_and_wrong_gradient_fails() {
        let p = vec![Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap()];
        let f = |x: &[Tensor<f64>]| Ok(x[0].data().iter().map(|v| v * v * v).sum::<f64>());
        let good = vec![p[0].map(|v| 3.0 * v * v)];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let r = check_gradients(&p, &good, f, 10, 1e-5, 1e-8, &mut rng).unwrap();
        assert!(r.max_relative_error() < 1e-8);
        let bad = vec![p[0].map(|v| 2.0 * v * v)];
        let r = check_gradients(&p, &bad, f, 10, 1e-5, 1e-8, &mut rng).unwrap();
        assert!(r.max_relative_error() > 0.1);
    }
}
