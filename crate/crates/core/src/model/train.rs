use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FullPrecision, SyntheticDataset, Targets, TaskOutputs, TaskVars, ToyModel};
use crate::error::{shape_err, Error, Result};
use crate::optim::{AdamW, AdamWConfig, CosineSchedule};
use crate::tensor::{Tape, Tensor, Var};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Camera,
    Depth,
    Point,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Camera, Task::Depth, Task::Point];

    pub fn name(self) -> &'static str {
        match self {
            Task::Camera => "camera",
            Task::Depth => "depth",
            Task::Point => "point",
        }
    }
}

/// One value per task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskLosses<V> {
    pub camera: V,
    pub depth: V,
    pub point: V,
}

impl<V: Copy> TaskLosses<V> {
    pub fn get(&self, task: Task) -> V {
        match task {
            Task::Camera => self.camera,
            Task::Depth => self.depth,
            Task::Point => self.point,
        }
    }

    pub fn to_array(&self) -> [V; 3] {
        [self.camera, self.depth, self.point]
    }
}

impl TaskLosses<f64> {
    pub fn total(&self) -> f64 {
        self.camera + self.depth + self.point
    }
}

fn mse<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
    if tape.shape(pred) != target.shape() {
        return Err(shape_err(
            "task_losses",
            format!(
                "prediction {:?} vs target {:?}",
                tape.shape(pred),
                target.shape()
            ),
        ));
    }
    let t = tape.constant(target.clone());
    let d = tape.sub(pred, t)?;
    let d = tape.square(d)?;
    tape.mean(d)
}

/// Mean-squared error of each task head, as differentiable scalars.
pub fn task_losses<T: Scalar>(
    tape: &mut Tape<T>,
    out: &TaskVars,
    targets: &Targets<T>,
) -> Result<TaskLosses<Var>> {
    Ok(TaskLosses {
        camera: mse(tape, out.pose, &targets.pose)?,
        depth: mse(tape, out.depth, &targets.depth)?,
        point: mse(tape, out.points, &targets.points)?,
    })
}

fn mse_value<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(shape_err(
            "task_losses",
            format!(
                "prediction {:?} vs target {:?}",
                pred.shape(),
                target.shape()
            ),
        ));
    }
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum();
    Ok(s / pred.len() as f64)
}

/// Gradient-free [`task_losses`] on concrete outputs.
pub fn task_loss_values<T: Scalar>(
    out: &TaskOutputs<T>,
    targets: &Targets<T>,
) -> Result<TaskLosses<f64>> {
    Ok(TaskLosses {
        camera: mse_value(&out.pose, &targets.pose)?,
        depth: mse_value(&out.depth, &targets.depth)?,
        point: mse_value(&out.points, &targets.points)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Final learning rate as a fraction of `lr` under cosine decay.
    pub final_lr_frac: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            lr: 5e-3,
            batch_size: 16,
            weight_decay: 0.0,
            final_lr_frac: 0.02,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Summed task loss on the full training set before the first step.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_task_losses: TaskLosses<f64>,
    /// Summed minibatch loss of every step.
    pub trace: Vec<f64>,
    /// Euclidean norm of the full-training-set gradient of the summed loss
    /// over all parameters, after training.
    pub final_grad_norm: f64,
}

/// Summed task losses over a dataset, evaluated in fixed chunks.
pub fn dataset_losses<T: Scalar>(
    model: &ToyModel<T>,
    data: &SyntheticDataset<T>,
) -> Result<TaskLosses<f64>> {
    const CHUNK: usize = 32;
    let mut acc = [0.0; 3];
    let n = data.len();
    for lo in (0..n).step_by(CHUNK) {
        let hi = (lo + CHUNK).min(n);
        let (x, y) = data.range(lo, hi)?;
        let out = model.predict_with(&x, &mut FullPrecision)?;
        let l = task_loss_values(&out, &y)?;
        let w = (hi - lo) as f64 / n as f64;
        for (a, v) in acc.iter_mut().zip(l.to_array()) {
            *a += w * v;
        }
    }
    Ok(TaskLosses {
        camera: acc[0],
        depth: acc[1],
        point: acc[2],
    })
}

/// Task losses and parameter gradients of the summed task loss on one batch.
fn loss_and_grads<T: Scalar>(
    model: &ToyModel<T>,
    x: &Tensor<T>,
    y: &Targets<T>,
) -> Result<(TaskLosses<f64>, Vec<Vec<T>>)> {
    let mut tape = Tape::new();
    let bm = model.bind(&mut tape, true);
    let xin = tape.constant(x.clone());
    let tr = model.forward(&mut tape, &bm, xin, &mut FullPrecision, false)?;
    let l = task_losses(&mut tape, &tr.outputs, y)?;
    let s = tape.add(l.camera, l.depth)?;
    let s = tape.add(s, l.point)?;
    tape.backward(s)?;
    let grads = ToyModel::<T>::bound_vars(&bm)
        .into_iter()
        .map(|v| tape.grad_tensor(v).into_data())
        .collect();
    let losses = TaskLosses {
        camera: tape.item(l.camera).as_f64(),
        depth: tape.item(l.depth).as_f64(),
        point: tape.item(l.point).as_f64(),
    };
    Ok((losses, grads))
}

/// Task losses and the gradient norm of the summed loss over a dataset, in
/// one pass.
fn losses_and_gradient_norm<T: Scalar>(
    model: &ToyModel<T>,
    data: &SyntheticDataset<T>,
) -> Result<(TaskLosses<f64>, f64)> {
    const CHUNK: usize = 32;
    let n = data.len();
    let mut acc = [0.0; 3];
    let mut total: Option<Vec<Vec<f64>>> = None;
    for lo in (0..n).step_by(CHUNK) {
        let hi = (lo + CHUNK).min(n);
        let (x, y) = data.range(lo, hi)?;
        let (l, g) = loss_and_grads(model, &x, &y)?;
        let w = (hi - lo) as f64 / n as f64;
        for (a, v) in acc.iter_mut().zip(l.to_array()) {
            *a += w * v;
        }
        let t = total.get_or_insert_with(|| g.iter().map(|v| vec![0.0; v.len()]).collect());
        for (a, b) in t.iter_mut().zip(&g) {
            for (ai, bi) in a.iter_mut().zip(b) {
                *ai += w * bi.as_f64();
            }
        }
    }
    let t = total.unwrap_or_default();
    let losses = TaskLosses {
        camera: acc[0],
        depth: acc[1],
        point: acc[2],
    };
    Ok((
        losses,
        t.iter().flatten().map(|v| v * v).sum::<f64>().sqrt(),
    ))
}

/// Gradient norm of the summed loss over the whole dataset.
pub fn full_gradient_norm<T: Scalar>(
    model: &ToyModel<T>,
    data: &SyntheticDataset<T>,
) -> Result<f64> {
    Ok(losses_and_gradient_norm(model, data)?.1)
}

/// Trains all model parameters with AdamW on the summed task loss.
pub fn train_toy<T: Scalar>(
    model: &mut ToyModel<T>,
    data: &SyntheticDataset<T>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::InvalidArgument(
            "batch_size and lr must be positive".into(),
        ));
    }
    let initial = dataset_losses(model, data)?.total();
    let mut opt = AdamW::<T>::new(AdamWConfig::default());
    let g = opt.add_group(cfg.lr, cfg.weight_decay);
    for p in model.params_mut() {
        opt.register(g, p.len());
    }
    let sched = CosineSchedule {
        t_max: cfg.steps,
        eta_min: cfg.lr * cfg.final_lr_frac,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = data.len();
    let bs = cfg.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if cursor + bs > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let (x, y) = data.batch(&order[cursor..cursor + bs])?;
        cursor += bs;
        let (losses, grads) = loss_and_grads(model, &x, &y)?;
        let loss = losses.total();
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        trace.push(loss);
        sched.apply(&mut opt, step);
        let mut params: Vec<&mut [T]> = model
            .params_mut()
            .into_iter()
            .map(|p| p.data_mut())
            .collect();
        let grads: Vec<&[T]> = grads.iter().map(|g| g.as_slice()).collect();
        opt.step(&mut params, &grads, 1.0);
    }
    let (final_task_losses, final_grad_norm) = losses_and_gradient_norm(model, data)?;
    let final_loss = final_task_losses.total();
    if !final_loss.is_finite() {
        return Err(Error::Diverged {
            step: cfg.steps,
            loss: final_loss,
        });
    }
    log::info!(
        "trained {} steps: loss {:.4e} -> {:.4e}",
        cfg.steps,
        initial,
        final_loss
    );
    Ok(TrainReport {
        initial_loss: initial,
        final_loss,
        final_task_losses,
        trace,
        final_grad_norm,
    })
}
