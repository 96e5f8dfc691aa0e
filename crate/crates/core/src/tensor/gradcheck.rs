use super::Tensor;
use crate::error::{Error, Result};
use crate::Scalar;

/// Central-difference gradient `(f(x+eps e_i) - f(x-eps e_i)) / (2 eps)` of a
/// scalar function at `point`.
///
/// Fails when `eps` is too small for the floating format: every coordinate
/// shows an exactly zero difference although the function visibly varies at
/// a coarser step.
pub fn finite_difference_grad<T, F>(mut f: F, point: &Tensor<T>, eps: T) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    if !(eps > T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "eps must be positive, got {}",
            eps
        )));
    }
    let mut x = point.clone();
    let two_eps = eps + eps;
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + eps;
        let up = f(&x)?;
        x.data_mut()[i] = orig - eps;
        let down = f(&x)?;
        x.data_mut()[i] = orig;
        grad.push((up - down) / two_eps);
    }
    if !grad.is_empty() && grad.iter().all(|g| *g == T::zero()) {
        let probe = T::lit(1e-3);
        for i in 0..point.len() {
            let orig = x.data()[i];
            let h = probe * (T::one() + orig.abs());
            x.data_mut()[i] = orig + h;
            let up = f(&x)?;
            x.data_mut()[i] = orig - h;
            let down = f(&x)?;
            x.data_mut()[i] = orig;
            if up != down {
                return Err(Error::InvalidArgument(format!(
                    "eps {} too small for {}: zero difference on a varying function",
                    eps,
                    T::DTYPE
                )));
            }
        }
    }
    Tensor::new(point.shape(), grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let x = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.5 - 1.0);
        let g = finite_difference_grad(|t| Ok(t.sum()), &x, 1e-6).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::new(&[1], vec![3.0f64]).unwrap();
        let g = finite_difference_grad(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-6).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn tiny_eps_is_detected() {
        let x = Tensor::new(&[1], vec![1.0f32]).unwrap();
        let r = finite_difference_grad(|t| Ok(t.data()[0] * 2.0), &x, 1e-12f32);
        assert!(r.is_err());
        assert!(finite_difference_grad(|t| Ok(t.sum()), &x, 0.0f32).is_err());
    }
}
