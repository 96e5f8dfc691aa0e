//! Diagonal empirical Fisher at block outputs, task and block normalization
//! into calibration weights, and closed-form checks of the Fisher
//! approximation.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::io::{f64s_to_le, le_to_f64s, read_container, write_container};
use crate::model::{task_losses, FullPrecision, SyntheticDataset, Task, ToyModel, ToyModelConfig};
use crate::tensor::{Tape, Tensor, Var};
use crate::Scalar;

/// Lower bound applied to normalized calibration weights.
pub const WEIGHT_FLOOR: f64 = 0.01;
/// Largest channel count accepted by [`estimate_full_fisher`].
pub const FULL_FISHER_MAX_CHANNELS: usize = 8;
const CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveMode {
    /// Gradients of each task's mean-squared-error loss.
    TaskLoss,
    /// Gradients of the sum of each task head's outputs.
    OutputSum,
}

/// Nonnegative scores indexed `[task][block][channel]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisherTensor {
    pub tasks: Vec<Task>,
    pub blocks: usize,
    pub channels: usize,
    pub objective_mode: ObjectiveMode,
    pub seed: u64,
    pub n_samples: usize,
    /// Row-major `tasks x blocks x channels`.
    pub raw: Vec<f64>,
}

impl FisherTensor {
    pub fn get(&self, task: usize, block: usize, channel: usize) -> f64 {
        self.raw[(task * self.blocks + block) * self.channels + channel]
    }

    /// Scores of one task and block.
    pub fn row(&self, task: usize, block: usize) -> &[f64] {
        let o = (task * self.blocks + block) * self.channels;
        &self.raw[o..o + self.channels]
    }

    pub fn task_index(&self, task: Task) -> Option<usize> {
        self.tasks.iter().position(|&t| t == task)
    }

    /// Every entry set to `value`; useful as a neutral weighting.
    pub fn constant(tasks: Vec<Task>, blocks: usize, channels: usize, value: f64) -> Self {
        Self {
            raw: vec![value; tasks.len() * blocks * channels],
            tasks,
            blocks,
            channels,
            objective_mode: ObjectiveMode::OutputSum,
            seed: 0,
            n_samples: 0,
        }
    }
}

/// Scalar objective of one task over a batch: summed per-sample quantities,
/// so each sample's gradient is unaffected by the others in the batch.
fn task_objective<T: Scalar>(
    tape: &mut Tape<T>,
    model_out: &crate::model::TaskVars,
    targets: &crate::model::Targets<T>,
    mode: ObjectiveMode,
    batch: usize,
) -> Result<[Var; 3]> {
    match mode {
        ObjectiveMode::OutputSum => Ok([
            tape.sum(model_out.pose)?,
            tape.sum(model_out.depth)?,
            tape.sum(model_out.points)?,
        ]),
        ObjectiveMode::TaskLoss => {
            let l = task_losses(tape, model_out, targets)?;
            let b = T::lit(batch as f64);
            Ok([
                tape.scale(l.camera, b)?,
                tape.scale(l.depth, b)?,
                tape.scale(l.point, b)?,
            ])
        }
    }
}

/// Hook gradients `[task][block] -> [batch, tokens, channels]` for one batch.
fn hook_gradients<T: Scalar>(
    model: &ToyModel<T>,
    data: &SyntheticDataset<T>,
    idx: &[usize],
    mode: ObjectiveMode,
) -> Result<Vec<Vec<Vec<T>>>> {
    let (x, y) = data.batch(idx)?;
    let mut tape = Tape::new();
    let bm = model.bind(&mut tape, false);
    let xin = tape.constant(x);
    let tr = model.forward(&mut tape, &bm, xin, &mut FullPrecision, true)?;
    let objs = task_objective(&mut tape, &tr.outputs, &y, mode, idx.len())?;
    let mut out = Vec::with_capacity(3);
    for obj in objs {
        tape.zero_grad();
        tape.backward(obj)?;
        let per_block = tr
            .hooks
            .iter()
            .map(|&h| {
                let g = tape.grad_tensor(h);
                if !g.is_finite() {
                    return Err(Error::NonFinite("Fisher gradient".into()));
                }
                Ok(g.into_data())
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(per_block);
    }
    Ok(out)
}

/// `F[k][l][c] = (1/N) sum_n sum_t (d obj_k / d h_{l,t,c})^2`, accumulated
/// over samples in dataset order.
pub fn estimate_diagonal_fisher<T: Scalar>(
    model: &ToyModel<T>,
    data: &SyntheticDataset<T>,
    mode: ObjectiveMode,
) -> Result<FisherTensor> {
    let cfg = &model.config;
    let (nl, nc) = (model.num_blocks(), cfg.hidden_dim);
    let n = data.len();
    let mut raw = vec![0.0f64; 3 * nl * nc];
    for lo in (0..n).step_by(CHUNK) {
        let idx: Vec<usize> = (lo..(lo + CHUNK).min(n)).collect();
        let grads = hook_gradients(model, data, &idx, mode)?;
        for (k, per_block) in grads.iter().enumerate() {
            for (l, g) in per_block.iter().enumerate() {
                let row = &mut raw[(k * nl + l) * nc..(k * nl + l + 1) * nc];
                for tok in g.chunks_exact(nc) {
                    for (acc, &v) in row.iter_mut().zip(tok) {
                        let v = v.as_f64();
                        *acc += v * v;
                    }
                }
            }
        }
    }
    raw.iter_mut().for_each(|v| *v /= n as f64);
    Ok(FisherTensor {
        tasks: Task::ALL.to_vec(),
        blocks: nl,
        channels: nc,
        objective_mode: mode,
        seed: data.seed,
        n_samples: n,
        raw,
    })
}

/// Per-sample hook gradients of every task at every block, kept whole so
/// block-level quadratic forms `dh^T F dh` can be evaluated without forming
/// `F`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleGradients {
    pub blocks: usize,
    pub n_samples: usize,
    /// Length of one sample's block output, `tokens * channels`.
    pub sample_len: usize,
    pub objective_mode: ObjectiveMode,
    /// Row-major `[task][block][sample][sample_len]`.
    grads: Vec<f64>,
}

impl SampleGradients {
    fn sample(&self, task: usize, block: usize, n: usize) -> &[f64] {
        let o = ((task * self.blocks + block) * self.n_samples + n) * self.sample_len;
        &self.grads[o..o + self.sample_len]
    }

    /// `dh^T F dh = (1/N) sum_n (g_n . dh)^2` for one sample's block output
    /// perturbation `dh`.
    pub fn quadratic_form(&self, task: usize, block: usize, dh: &[f64]) -> Result<f64> {
        if task >= 3 || block >= self.blocks {
            return Err(Error::InvalidArgument(format!(
                "no gradients for task {} block {}",
                task, block
            )));
        }
        if dh.len() != self.sample_len {
            return Err(shape_err(
                "quadratic_form",
                format!("perturbation length {} vs {}", dh.len(), self.sample_len),
            ));
        }
        let total: f64 = (0..self.n_samples)
            .map(|n| {
                let d: f64 = self
                    .sample(task, block, n)
                    .iter()
                    .zip(dh)
                    .map(|(g, h)| g * h)
                    .sum();
                d * d
            })
            .sum();
        Ok(total / self.n_samples as f64)
    }

    /// Diagonal Fisher rebuilt from the stored gradients.
    pub fn diagonal(&self, channels: usize, seed: u64) -> FisherTensor {
        let nl = self.blocks;
        let mut raw = vec![0.0; 3 * nl * channels];
        for k in 0..3 {
            for l in 0..nl {
                let row = &mut raw[(k * nl + l) * channels..(k * nl + l + 1) * channels];
                for n in 0..self.n_samples {
                    for tok in self.sample(k, l, n).chunks_exact(channels) {
                        row.iter_mut().zip(tok).for_each(|(a, g)| *a += g * g);
                    }
                }
            }
        }
        raw.iter_mut().for_each(|v| *v /= self.n_samples as f64);
        FisherTensor {
            tasks: Task::ALL.to_vec(),
            blocks: nl,
            channels,
            objective_mode: self.objective_mode,
            seed,
            n_samples: self.n_samples,
            raw,
        }
    }
}

pub fn sample_gradients<T: Scalar>(
    model: &ToyModel<T>,
    data: &SyntheticDataset<T>,
    mode: ObjectiveMode,
) -> Result<SampleGradients> {
    let nl = model.num_blocks();
    let n = data.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let sample_len = model.config.num_tokens() * model.config.hidden_dim;
    let mut grads = vec![0.0; 3 * nl * n * sample_len];
    for lo in (0..n).step_by(CHUNK) {
        let idx: Vec<usize> = (lo..(lo + CHUNK).min(n)).collect();
        let g = hook_gradients(model, data, &idx, mode)?;
        for (k, per_block) in g.iter().enumerate() {
            for (l, gl) in per_block.iter().enumerate() {
                let o = ((k * nl + l) * n + lo) * sample_len;
                grads[o..o + gl.len()]
                    .iter_mut()
                    .zip(gl)
                    .for_each(|(a, v)| *a = v.as_f64());
            }
        }
    }
    Ok(SampleGradients {
        blocks: nl,
        n_samples: n,
        sample_len,
        objective_mode: mode,
        grads,
    })
}

/// `(1/N) sum_n sum_t g g^T` at one block for one task, `C x C` row-major.
pub fn estimate_full_fisher<T: Scalar>(
    model: &ToyModel<T>,
    data: &SyntheticDataset<T>,
    block: usize,
    task: Task,
    mode: ObjectiveMode,
) -> Result<Vec<f64>> {
    let c = model.config.hidden_dim;
    if c > FULL_FISHER_MAX_CHANNELS {
        return Err(Error::InvalidArgument(format!(
            "full Fisher limited to {} channels, model has {}",
            FULL_FISHER_MAX_CHANNELS, c
        )));
    }
    if block >= model.num_blocks() {
        return Err(Error::InvalidArgument(format!(
            "block {} out of range",
            block
        )));
    }
    let k = Task::ALL
        .iter()
        .position(|&t| t == task)
        .expect("known task");
    let n = data.len();
    let mut f = vec![0.0f64; c * c];
    for lo in (0..n).step_by(CHUNK) {
        let idx: Vec<usize> = (lo..(lo + CHUNK).min(n)).collect();
        let grads = hook_gradients(model, data, &idx, mode)?;
        for tok in grads[k][block].chunks_exact(c) {
            for i in 0..c {
                let gi = tok[i].as_f64();
                for j in 0..c {
                    f[i * c + j] += gi * tok[j].as_f64();
                }
            }
        }
    }
    f.iter_mut().for_each(|v| *v /= n as f64);
    Ok(f)
}

/// `s[l][c] = sum_k F_k[l][c] / mean(F_k)`, row-major `blocks x channels`.
pub fn combine_tasks(f: &FisherTensor) -> Result<Vec<f64>> {
    let per = f.blocks * f.channels;
    if f.raw.len() != f.tasks.len() * per {
        return Err(shape_err(
            "combine_tasks",
            "raw length does not match dimensions",
        ));
    }
    if let Some(v) = f.raw.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "Fisher entry {} is not a finite nonnegative value",
            v
        )));
    }
    let mut s = vec![0.0; per];
    for (k, task) in f.tasks.iter().enumerate() {
        let slab = &f.raw[k * per..(k + 1) * per];
        let mean = slab.iter().sum::<f64>() / per as f64;
        if !(mean > 0.0) {
            return Err(Error::ZeroTaskFisher(task.name().to_string()));
        }
        for (acc, &v) in s.iter_mut().zip(slab) {
            *acc += v / mean;
        }
    }
    Ok(s)
}

/// Per-block channel weights with mean one, floored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationWeights {
    pub blocks: usize,
    pub channels: usize,
    pub floor: f64,
    /// Weights before the floor, mean one per block.
    pub pre_floor: Vec<f64>,
    pub w: Vec<f64>,
}

impl CalibrationWeights {
    pub fn row(&self, block: usize) -> &[f64] {
        &self.w[block * self.channels..(block + 1) * self.channels]
    }

    pub fn uniform(blocks: usize, channels: usize) -> Self {
        Self {
            blocks,
            channels,
            floor: WEIGHT_FLOOR,
            pre_floor: vec![1.0; blocks * channels],
            w: vec![1.0; blocks * channels],
        }
    }
}

/// `w[l][c] = max(s[l][c] / mean_c s[l][.], floor)`.
pub fn block_weights(
    s: &[f64],
    blocks: usize,
    channels: usize,
    floor: f64,
) -> Result<CalibrationWeights> {
    if s.len() != blocks * channels || channels == 0 {
        return Err(shape_err(
            "block_weights",
            format!("{} scores for {}x{}", s.len(), blocks, channels),
        ));
    }
    let mut pre = vec![0.0; s.len()];
    for l in 0..blocks {
        let row = &s[l * channels..(l + 1) * channels];
        let mean = row.iter().sum::<f64>() / channels as f64;
        if !(mean > 0.0) {
            return Err(Error::ZeroBlockRow(l));
        }
        for (p, &v) in pre[l * channels..(l + 1) * channels].iter_mut().zip(row) {
            *p = v / mean;
        }
    }
    let w = pre.iter().map(|&v| v.max(floor)).collect();
    Ok(CalibrationWeights {
        blocks,
        channels,
        floor,
        pre_floor: pre,
        w,
    })
}

/// Normalization applied when a Fisher tensor is loaded for calibration.
pub fn calibration_weights(f: &FisherTensor) -> Result<CalibrationWeights> {
    block_weights(&combine_tasks(f)?, f.blocks, f.channels, WEIGHT_FLOOR)
}

/// `(1/2) E_{n,t}[sum_c F[c] dh_{t,c}^2]` for block-output perturbations
/// `dh` of shape `[.., channels]`.
pub fn predicted_loss_increase<T: Scalar>(fisher_row: &[f64], dh: &Tensor<T>) -> Result<f64> {
    let c = fisher_row.len();
    if dh.last_dim() != c || dh.is_empty() {
        return Err(shape_err(
            "predicted_loss_increase",
            format!("{} scores vs perturbation {:?}", c, dh.shape()),
        ));
    }
    let rows = dh.len() / c;
    let mut acc = 0.0;
    for tok in dh.data().chunks_exact(c) {
        for (&f, &d) in fisher_row.iter().zip(tok) {
            let d = d.as_f64();
            acc += f * d * d;
        }
    }
    Ok(0.5 * acc / rows as f64)
}

/// `|q - fp| / fp * 100`.
pub fn npd(metric_q: f64, metric_fp: f64) -> Result<f64> {
    if metric_fp == 0.0 || !metric_fp.is_finite() || !metric_q.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "NPD needs finite metrics and a nonzero reference, got {} vs {}",
            metric_q, metric_fp
        )));
    }
    Ok((metric_q - metric_fp).abs() / metric_fp.abs() * 100.0)
}

/// Monte-Carlo comparison of the expected Hessian and the Fisher of a
/// Gaussian linear regression negative log-likelihood.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub n_samples: usize,
    pub dim: usize,
    pub sigma: f64,
    /// Norm of the average score at the true parameter.
    pub mean_score_norm: f64,
    /// `sqrt(E ||score - mean||^2)` per sample.
    pub score_std: f64,
    /// Relative Frobenius gap between the MC Hessian and MC Fisher at the
    /// true parameter.
    pub gap: f64,
    /// The same gap at a shifted parameter.
    pub misspecified_gap: f64,
    /// `E[x x^T] / sigma^2`, row-major.
    pub analytic: Vec<f64>,
    pub hessian_mc: Vec<f64>,
    pub fisher_mc: Vec<f64>,
}

fn rel_frobenius(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

/// Regression `y = w*^T x + e`, `x = A z` with `z, e` Gaussian, evaluated at
/// `w*` and at `w* + 0.5` (every coordinate shifted).
pub fn verify_hessian_fisher_identity(n_samples: usize, seed: u64) -> Result<IdentityReport> {
    const DIM: usize = 3;
    const SIGMA: f64 = 0.5;
    if n_samples < 2 {
        return Err(Error::InvalidArgument("need at least two samples".into()));
    }
    let mixing = [[1.0, 0.0, 0.0], [0.5, 1.0, 0.0], [-0.3, 0.2, 0.8]];
    let w_star = [0.7, -1.2, 0.4];
    let shift = 0.5;
    // E[x x^T] = A A^T
    let mut analytic = vec![0.0; DIM * DIM];
    for i in 0..DIM {
        for j in 0..DIM {
            analytic[i * DIM + j] =
                (0..DIM).map(|k| mixing[i][k] * mixing[j][k]).sum::<f64>() / (SIGMA * SIGMA);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hess = vec![0.0; DIM * DIM];
    let mut fisher = vec![0.0; DIM * DIM];
    let mut fisher_shift = vec![0.0; DIM * DIM];
    let mut score_sum = [0.0; DIM];
    let mut score_sq = 0.0;
    for _ in 0..n_samples {
        let z: [f64; DIM] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
        let x: [f64; DIM] = std::array::from_fn(|i| (0..DIM).map(|k| mixing[i][k] * z[k]).sum());
        let e: f64 = StandardNormal.sample(&mut rng);
        let y = w_star.iter().zip(&x).map(|(w, xi)| w * xi).sum::<f64>() + SIGMA * e;
        let r = y - w_star.iter().zip(&x).map(|(w, xi)| w * xi).sum::<f64>();
        let r_shift = y - w_star
            .iter()
            .zip(&x)
            .map(|(w, xi)| (w + shift) * xi)
            .sum::<f64>();
        let inv = 1.0 / (SIGMA * SIGMA);
        for i in 0..DIM {
            // score of the log-likelihood: r x / sigma^2
            let si = r * x[i] * inv;
            score_sum[i] += si;
            score_sq += si * si;
            for j in 0..DIM {
                let xx = x[i] * x[j];
                hess[i * DIM + j] += xx * inv;
                fisher[i * DIM + j] += r * r * xx * inv * inv;
                fisher_shift[i * DIM + j] += r_shift * r_shift * xx * inv * inv;
            }
        }
    }
    let n = n_samples as f64;
    for m in [&mut hess, &mut fisher, &mut fisher_shift] {
        m.iter_mut().for_each(|v| *v /= n);
    }
    let mean: Vec<f64> = score_sum.iter().map(|s| s / n).collect();
    let mean_norm = mean.iter().map(|m| m * m).sum::<f64>().sqrt();
    let var = (score_sq / n - mean.iter().map(|m| m * m).sum::<f64>()) * n / (n - 1.0);
    // At the shifted parameter the Hessian of the NLL is unchanged (it does
    // not depend on the parameter for this model).
    Ok(IdentityReport {
        n_samples,
        dim: DIM,
        sigma: SIGMA,
        mean_score_norm: mean_norm,
        score_std: var.max(0.0).sqrt(),
        gap: rel_frobenius(&hess, &fisher),
        misspecified_gap: rel_frobenius(&hess, &fisher_shift),
        analytic,
        hessian_mc: hess,
        fisher_mc: fisher,
    })
}

const FISHER_MAGIC: &[u8; 8] = b"FGQFSHR1";

#[derive(Serialize, Deserialize)]
struct FisherHeader {
    tasks: Vec<Task>,
    blocks: usize,
    channels: usize,
    objective_mode: ObjectiveMode,
    seed: u64,
    n_samples: usize,
}

impl FisherTensor {
    /// Raw (unnormalized) scores with a JSON header.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = FisherHeader {
            tasks: self.tasks.clone(),
            blocks: self.blocks,
            channels: self.channels,
            objective_mode: self.objective_mode,
            seed: self.seed,
            n_samples: self.n_samples,
        };
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_container(&mut f, FISHER_MAGIC, &header, &f64s_to_le(&self.raw))?;
        std::io::Write::flush(&mut f)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let (h, payload): (FisherHeader, _) = read_container(&mut f, FISHER_MAGIC)?;
        let raw = le_to_f64s(&payload)?;
        if raw.len() != h.tasks.len() * h.blocks * h.channels {
            return Err(Error::Format(format!(
                "{} values for {}x{}x{}",
                raw.len(),
                h.tasks.len(),
                h.blocks,
                h.channels
            )));
        }
        Ok(Self {
            tasks: h.tasks,
            blocks: h.blocks,
            channels: h.channels,
            objective_mode: h.objective_mode,
            seed: h.seed,
            n_samples: h.n_samples,
            raw,
        })
    }

    /// Loads and checks the dimensions against a model configuration.
    pub fn load_for(path: &Path, cfg: &ToyModelConfig) -> Result<Self> {
        let f = Self::load(path)?;
        if f.blocks != cfg.num_blocks()
            || f.channels != cfg.hidden_dim
            || f.tasks.len() != Task::ALL.len()
        {
            return Err(Error::Format(format!(
                "Fisher is {}x{}x{}, model needs {}x{}x{}",
                f.tasks.len(),
                f.blocks,
                f.channels,
                Task::ALL.len(),
                cfg.num_blocks(),
                cfg.hidden_dim
            )));
        }
        Ok(f)
    }
}
