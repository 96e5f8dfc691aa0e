//! Invertible affine transforms folded into linear weights, and fixed
//! randomized Hadamard rotations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::Linear;
use crate::quant::{fake_quant, QuantSpec};
use crate::tensor::linalg::{self, Lu};
use crate::tensor::{Tape, Tensor, Var};
use crate::Scalar;

/// Largest accepted 1-norm condition estimate of a transform.
pub const MAX_COND: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    /// Learnable dense matrix starting at the identity.
    IdentityInitDense,
    /// Frozen `H D / sqrt(n)` with a seeded random sign diagonal `D`.
    FixedHadamard,
}

/// `x -> x P diag(s)`; the inverse is folded into the following weight.
#[derive(Clone, Debug)]
pub struct AffineTransform<T> {
    p: Tensor<T>,
    diag_scale: Tensor<T>,
    kind: TransformKind,
    version: u64,
}

/// Equal parameters and kind; the version counter is ignored.
impl<T: PartialEq> PartialEq for AffineTransform<T> {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind && self.p == other.p && self.diag_scale == other.diag_scale
    }
}

/// Sylvester Hadamard matrix of order `n` (a power of two), unnormalized.
pub fn hadamard<T: Scalar>(n: usize) -> Result<Tensor<T>> {
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::InvalidArgument(format!(
            "Hadamard order {} is not a power of two",
            n
        )));
    }
    Ok(Tensor::from_fn(&[n, n], |i| {
        let (r, c) = (i / n, i % n);
        if (r & c).count_ones() % 2 == 0 {
            T::one()
        } else {
            -T::one()
        }
    }))
}

/// Haar-like random orthogonal matrix (Gram-Schmidt on a Gaussian matrix).
pub fn random_orthogonal<T: Scalar>(n: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for c in &cols {
                let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            cols.push(v);
        }
    }
    Tensor::from_fn(&[n, n], |i| T::lit(cols[i % n][i / n]))
}

impl<T: Scalar> AffineTransform<T> {
    pub fn identity(dim: usize) -> Self {
        Self {
            p: Tensor::identity(dim),
            diag_scale: Tensor::ones(&[dim]),
            kind: TransformKind::IdentityInitDense,
            version: 0,
        }
    }

    /// Frozen `H D / sqrt(dim)`.
    pub fn hadamard(dim: usize, seed: u64) -> Result<Self> {
        let h = hadamard::<T>(dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let signs: Vec<bool> = (0..dim).map(|_| rng.random::<bool>()).collect();
        let norm = T::lit(1.0 / (dim as f64).sqrt());
        let p = Tensor::from_fn(&[dim, dim], |i| {
            let v = h.data()[i] * norm;
            if signs[i % dim] {
                -v
            } else {
                v
            }
        });
        Ok(Self {
            p,
            diag_scale: Tensor::ones(&[dim]),
            kind: TransformKind::FixedHadamard,
            version: 0,
        })
    }

    /// Builds a transform from explicit parameters.
    pub fn from_parts(p: Tensor<T>, diag_scale: Tensor<T>, kind: TransformKind) -> Result<Self> {
        let n = diag_scale.len();
        if p.shape() != [n, n] || diag_scale.rank() != 1 {
            return Err(shape_err(
                "transform",
                format!("P {:?}, scale {:?}", p.shape(), diag_scale.shape()),
            ));
        }
        Ok(Self {
            p,
            diag_scale,
            kind,
            version: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.diag_scale.len()
    }

    pub fn kind(&self) -> TransformKind {
        self.kind
    }

    pub fn is_trainable(&self) -> bool {
        self.kind == TransformKind::IdentityInitDense
    }

    pub fn p(&self) -> &Tensor<T> {
        &self.p
    }

    pub fn diag_scale(&self) -> &Tensor<T> {
        &self.diag_scale
    }

    /// Incremented on every parameter update.
    pub fn version(&self) -> u64 {
        self.version
    }

    /// Replaces the parameters and bumps the version.
    pub fn set(&mut self, p: Tensor<T>, diag_scale: Tensor<T>) -> Result<()> {
        if p.shape() != self.p.shape() || diag_scale.shape() != self.diag_scale.shape() {
            return Err(shape_err("transform", "parameter shape changed"));
        }
        self.p = p;
        self.diag_scale = diag_scale;
        self.version += 1;
        Ok(())
    }

    /// `P diag(s)`.
    pub fn effective(&self) -> Tensor<T> {
        let n = self.dim();
        let s = self.diag_scale.data();
        Tensor::from_fn(&[n, n], |i| self.p.data()[i] * s[i % n])
    }

    pub fn condition_estimate(&self) -> Result<f64> {
        linalg::condition_estimate(self.effective().data(), self.dim())
    }

    /// `x P diag(s)` for `[.., dim]` inputs.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.matmul(&self.effective())
    }

    /// `(P diag(s))^{-1} W`.
    pub fn fold(&self, w: &Tensor<T>) -> Result<Tensor<T>> {
        fold(w, &self.effective())
    }
}

/// `P^{-1} W` by an LU solve, rejecting transforms whose condition estimate
/// exceeds [`MAX_COND`].
pub fn fold<T: Scalar>(w: &Tensor<T>, p: &Tensor<T>) -> Result<Tensor<T>> {
    let n = p.shape().first().copied().unwrap_or(0);
    if p.shape() != [n, n] || w.rank() != 2 || w.shape()[0] != n {
        return Err(shape_err(
            "fold",
            format!("{:?} \\ {:?}", p.shape(), w.shape()),
        ));
    }
    let lu = Lu::factor(p.data(), n)?;
    let cond = linalg::norm1(p.data(), n) * lu.inverse_norm1_estimate();
    if !(cond <= MAX_COND) {
        return Err(Error::IllConditioned(cond));
    }
    Tensor::new(w.shape(), lu.solve(w.data(), w.shape()[1])?)
}

/// A frozen linear whose weight has a transform's inverse folded in. The
/// cache records the transform version it was built from.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformedLinear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    folded: Tensor<T>,
    folded_version: u64,
}

impl<T: Scalar> TransformedLinear<T> {
    pub fn new(linear: &Linear<T>, transform: &AffineTransform<T>) -> Result<Self> {
        Ok(Self {
            weight: linear.weight.clone(),
            bias: linear.bias.clone(),
            folded: transform.fold(&linear.weight)?,
            folded_version: transform.version(),
        })
    }

    pub fn refold(&mut self, transform: &AffineTransform<T>) -> Result<()> {
        self.folded = transform.fold(&self.weight)?;
        self.folded_version = transform.version();
        Ok(())
    }

    pub fn is_stale(&self, transform: &AffineTransform<T>) -> bool {
        self.folded_version != transform.version()
    }

    /// Folded weight, refusing to serve a cache built from an older transform.
    pub fn folded(&self, transform: &AffineTransform<T>) -> Result<&Tensor<T>> {
        if self.is_stale(transform) {
            return Err(Error::StaleFold {
                transform: transform.version(),
                cache: self.folded_version,
            });
        }
        Ok(&self.folded)
    }

    /// Full-precision `(x P)(P^{-1} W) + b`.
    pub fn forward(&self, x: &Tensor<T>, transform: &AffineTransform<T>) -> Result<Tensor<T>> {
        let w = self.folded(transform)?;
        let xp = transform.apply(x)?;
        let y = xp.matmul(w)?;
        let b = self.bias.data();
        let n = b.len();
        Ok(Tensor::from_fn(y.shape(), |i| y.data()[i] + b[i % n]))
    }
}

/// Quantization inputs of one transformed linear on a tape.
#[derive(Clone, Copy, Debug)]
pub struct QuantLinearVars {
    /// `[in, out]` weight, before folding.
    pub weight: Var,
    pub bias: Var,
    /// Per-output-channel weight clip factors.
    pub weight_clip: Var,
}

/// `fake_quant(x P) fake_quant(P^{-1} W) + b` on a tape, differentiable in
/// the transform, diagonal scale and clip factors. `transform` is
/// `(P, diag_scale)`; `None` skips the transform entirely. Rows flagged in
/// `exempt_rows` skip activation quantization.
#[allow(clippy::too_many_arguments)]
pub fn transformed_quantized_linear<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    transform: Option<(Var, Var)>,
    layer: QuantLinearVars,
    act_clip: Var,
    wspec: QuantSpec,
    aspec: QuantSpec,
    exempt_rows: Option<std::sync::Arc<[bool]>>,
) -> Result<Var> {
    let (xt, w) = match transform {
        Some((p, s)) => {
            let peff = tape.mul(p, s)?;
            let xt = tape.matmul(x, peff)?;
            let w = tape.solve(peff, layer.weight, MAX_COND)?;
            (xt, w)
        }
        None => (x, layer.weight),
    };
    let xq = fake_quant(tape, xt, act_clip, aspec, exempt_rows)?;
    let wq = fake_quant(tape, w, layer.weight_clip, wspec, None)?;
    let y = tape.matmul(xq, wq)?;
    tape.add(y, layer.bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rel_error;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn identity_init_is_exact() {
        let t = AffineTransform::<f64>::identity(4);
        assert_eq!(t.p(), &Tensor::identity(4));
        assert_eq!(t.diag_scale().data(), &[1.0; 4]);
        let w = rand_tensor(&[4, 3], 1);
        assert_eq!(t.fold(&w).unwrap(), w);
    }

    #[test]
    fn hadamard_is_orthogonal_and_seeded() {
        let t = AffineTransform::<f64>::hadamard(4, 7).unwrap();
        let p = t.p();
        let ptp = p.t().unwrap().matmul(p).unwrap();
        assert!(rel_error(ptp.data(), Tensor::<f64>::identity(4).data()) <= 1e-12);
        assert_eq!(t, AffineTransform::<f64>::hadamard(4, 7).unwrap());
        assert!(AffineTransform::<f64>::hadamard(6, 7).is_err());
        let x = rand_tensor(&[5, 4], 2);
        let xp = t.apply(&x).unwrap();
        assert!((xp.frobenius() - x.frobenius()).abs() <= 1e-10 * x.frobenius());
    }

    #[test]
    fn scalar_transform_folds_exactly() {
        let p = Tensor::<f64>::identity(3).map(|v| 2.0 * v);
        let w = rand_tensor(&[3, 2], 3);
        let f = fold(&w, &p).unwrap();
        assert_eq!(f, w.map(|v| v / 2.0));
        let x = rand_tensor(&[4, 3], 4);
        let lhs = x.matmul(&p).unwrap().matmul(&f).unwrap();
        assert_eq!(lhs, x.matmul(&w).unwrap());
    }

    #[test]
    fn orthogonal_fold_round_trip() {
        let p = random_orthogonal::<f64>(8, 5);
        let w = rand_tensor(&[8, 6], 6);
        let x = rand_tensor(&[10, 8], 7);
        let lhs = x
            .matmul(&p)
            .unwrap()
            .matmul(&fold(&w, &p).unwrap())
            .unwrap();
        assert!(rel_error(lhs.data(), x.matmul(&w).unwrap().data()) <= 1e-10);
    }

    #[test]
    fn ill_conditioned_fold_rejected() {
        let mut p = Tensor::<f64>::identity(2);
        p.data_mut()[3] = 1e-9;
        assert!(matches!(
            fold(&rand_tensor(&[2, 2], 1), &p),
            Err(Error::IllConditioned(_))
        ));
    }

    #[test]
    fn stale_cache_is_refused_until_refolded() {
        let lin = Linear {
            weight: rand_tensor(&[4, 2], 8),
            bias: Tensor::zeros(&[2]),
        };
        let mut t = AffineTransform::<f64>::identity(4);
        let mut tl = TransformedLinear::new(&lin, &t).unwrap();
        let x = rand_tensor(&[3, 4], 9);
        assert!(tl.forward(&x, &t).is_ok());
        t.set(random_orthogonal(4, 1), Tensor::full(&[4], 1.5))
            .unwrap();
        assert!(matches!(tl.forward(&x, &t), Err(Error::StaleFold { .. })));
        tl.refold(&t).unwrap();
        let y = tl.forward(&x, &t).unwrap();
        assert!(rel_error(y.data(), x.matmul(&lin.weight).unwrap().data()) <= 1e-10);
    }
}
