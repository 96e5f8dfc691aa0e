//! Synthetic multi-view data from a fixed random teacher network.
//!
//! Every sample is drawn from its own RNG stream keyed by its global index, so
//! disjoint index ranges give disjoint, independently reproducible splits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ToyModelConfig;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;
use crate::Scalar;

/// Teacher feature width; the first half drives the dense targets and the
/// second half drives the pose target.
pub const TEACHER_WIDTH: usize = 16;
pub const DEFAULT_NOISE_STD: f64 = 0.01;
/// Input-layer gain of the teacher. Kept moderate so the student can fit the
/// targets closely within its training budget.
pub const TEACHER_GAIN: f64 = 0.7;

const TEACHER_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct Targets<T> {
    /// `[samples, pose_dim]`
    pub pose: Tensor<T>,
    /// `[samples, views, tokens]`
    pub depth: Tensor<T>,
    /// `[samples, views, tokens, 3]`
    pub points: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset<T> {
    /// `[samples, views, tokens, in_dim]`
    pub inputs: Tensor<T>,
    pub targets: Targets<T>,
    pub seed: u64,
    /// Global index of the first sample.
    pub start: usize,
}

/// Fixed teacher: `u = tanh(x A + c)` per token, then dense targets from
/// `u[..W/2]` per token and a pose that is a linear readout of the mean of
/// `u[W/2..]` over all tokens of a sample.
#[derive(Clone, Debug)]
pub struct Teacher {
    a1: Vec<f64>,
    c1: Vec<f64>,
    depth_w: Vec<f64>,
    point_w: Vec<f64>,
    pose_w1: Vec<f64>,
    pose_w2: Vec<f64>,
    in_dim: usize,
    pose_dim: usize,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let d = Normal::new(0.0, std).expect("valid std");
    (0..n).map(|_| d.sample(rng)).collect()
}

impl Teacher {
    pub fn new(cfg: &ToyModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(TEACHER_STREAM);
        let w = TEACHER_WIDTH;
        let h = w / 2;
        Self {
            a1: normal_vec(
                &mut rng,
                cfg.in_dim * w,
                TEACHER_GAIN / (cfg.in_dim as f64).sqrt(),
            ),
            c1: normal_vec(&mut rng, w, 0.1),
            depth_w: normal_vec(&mut rng, h, 1.5 / (h as f64).sqrt()),
            point_w: normal_vec(&mut rng, h * 3, 1.0 / (h as f64).sqrt()),
            pose_w1: normal_vec(&mut rng, h * h, 1.0 / (h as f64).sqrt()),
            pose_w2: normal_vec(&mut rng, h * cfg.pose_dim, 1.0 / (h as f64).sqrt()),
            in_dim: cfg.in_dim,
            pose_dim: cfg.pose_dim,
        }
    }

    fn features(&self, x: &[f64]) -> [f64; TEACHER_WIDTH] {
        let mut u = [0.0; TEACHER_WIDTH];
        for (j, uj) in u.iter_mut().enumerate() {
            let mut acc = self.c1[j];
            for (i, &xi) in x.iter().enumerate() {
                acc += xi * self.a1[i * TEACHER_WIDTH + j];
            }
            *uj = acc.tanh();
        }
        u
    }

    /// Noise-free targets of one sample given its `[tokens_total, in_dim]`
    /// inputs: `(pose, depth per token, points per token)`.
    pub fn sample_targets(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let h = TEACHER_WIDTH / 2;
        let tokens = x.len() / self.in_dim;
        let mut depth = Vec::with_capacity(tokens);
        let mut points = Vec::with_capacity(tokens * 3);
        let mut pooled = vec![0.0; h];
        for t in 0..tokens {
            let u = self.features(&x[t * self.in_dim..(t + 1) * self.in_dim]);
            let d: f64 = (0..h).map(|j| u[j] * self.depth_w[j]).sum();
            depth.push(2.0 + 0.5 * d.tanh());
            for k in 0..3 {
                points.push((0..h).map(|j| u[j] * self.point_w[j * 3 + k]).sum());
            }
            for j in 0..h {
                pooled[j] += u[h + j];
            }
        }
        // Mean pooling shrinks the signal by sqrt(tokens); undo that so the
        // pose target has unit-order variation.
        let gain = 1.0 / (tokens as f64).sqrt();
        let hidden: Vec<f64> = (0..h)
            .map(|i| {
                (0..h)
                    .map(|j| pooled[j] * gain * self.pose_w1[j * h + i])
                    .sum()
            })
            .collect();
        let pose = (0..self.pose_dim)
            .map(|k| {
                (0..h)
                    .map(|i| hidden[i] * self.pose_w2[i * self.pose_dim + k])
                    .sum()
            })
            .collect();
        (pose, depth, points)
    }
}

/// How to draw a dataset: input/teacher seed plus observation noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub seed: u64,
    pub noise_std: f64,
    pub noise_seed: u64,
}

impl DataSpec {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            noise_std: DEFAULT_NOISE_STD,
            noise_seed: seed ^ 0x6e6f_6973_65, // "noise"
        }
    }
}

/// Default draw of `n_samples` samples starting at global index 0.
pub fn generate_dataset<T: Scalar>(
    cfg: &ToyModelConfig,
    n_samples: usize,
    seed: u64,
) -> Result<SyntheticDataset<T>> {
    SyntheticDataset::generate(cfg, &DataSpec::new(seed), 0, n_samples)
}

impl<T: Scalar> SyntheticDataset<T> {
    /// Samples with global indices `start..start + n`.
    pub fn generate(cfg: &ToyModelConfig, spec: &DataSpec, start: usize, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument(
                "n_samples must be at least 1".into(),
            ));
        }
        if !(spec.noise_std >= 0.0 && spec.noise_std.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise_std {}",
                spec.noise_std
            )));
        }
        let teacher = Teacher::new(cfg, spec.seed);
        let (nv, k, d) = (cfg.num_views, cfg.tokens_per_view, cfg.in_dim);
        let per = nv * k * d;
        let mut inputs = Vec::with_capacity(n * per);
        let mut pose = Vec::with_capacity(n * cfg.pose_dim);
        let mut depth = Vec::with_capacity(n * nv * k);
        let mut points = Vec::with_capacity(n * nv * k * 3);
        for i in start..start + n {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            let x: Vec<f64> = (0..per).map(|_| StandardNormal.sample(&mut rng)).collect();
            let (p, dep, pts) = teacher.sample_targets(&x);
            let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.noise_seed);
            noise_rng.set_stream(i as u64);
            let mut noisy = |v: f64| {
                let e: f64 = StandardNormal.sample(&mut noise_rng);
                T::lit(v + spec.noise_std * e)
            };
            pose.extend(p.into_iter().map(&mut noisy));
            depth.extend(dep.into_iter().map(&mut noisy));
            points.extend(pts.into_iter().map(&mut noisy));
            inputs.extend(x.into_iter().map(T::lit));
        }
        Ok(Self {
            inputs: Tensor::new(&[n, nv, k, d], inputs)?,
            targets: Targets {
                pose: Tensor::new(&[n, cfg.pose_dim], pose)?,
                depth: Tensor::new(&[n, nv, k], depth)?,
                points: Tensor::new(&[n, nv, k, 3], points)?,
            },
            seed: spec.seed,
            start,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Inputs and targets of the given local sample indices, in order.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor<T>, Targets<T>)> {
        Ok((
            gather(&self.inputs, idx)?,
            Targets {
                pose: gather(&self.targets.pose, idx)?,
                depth: gather(&self.targets.depth, idx)?,
                points: gather(&self.targets.points, idx)?,
            },
        ))
    }

    /// Contiguous local range `lo..hi`.
    pub fn range(&self, lo: usize, hi: usize) -> Result<(Tensor<T>, Targets<T>)> {
        let idx: Vec<usize> = (lo..hi).collect();
        self.batch(&idx)
    }

    /// Global indices covered by this dataset.
    pub fn indices(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len()
    }
}

/// Rows of the leading axis.
pub(crate) fn gather<T: Scalar>(t: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let n = t.shape()[0];
    let row = t.len() / n.max(1);
    let mut out = Vec::with_capacity(idx.len() * row);
    for &i in idx {
        if i >= n {
            return Err(shape_err("gather", format!("index {} out of {}", i, n)));
        }
        out.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(&shape, out)
}
