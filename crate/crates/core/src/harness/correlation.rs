use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::{predicted_loss_increase, sample_gradients, FisherTensor, ObjectiveMode};
use crate::model::{task_loss_values, FullPrecision, SyntheticDataset, Task, ToyModel};
use crate::qmodel::{QuantizedModel, TransformInit};
use crate::quant::QuantSpec;
use crate::tensor::Tensor;
use crate::Scalar;

use super::eval::run_model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub block: usize,
    pub name: String,
    /// Per task: `0.5 E_x[dh^T F dh]` with the block-level Fisher `F` over
    /// the whole block output of a sample.
    pub predicted: [f64; 3],
    /// Per task: the diagonal-Fisher prediction `0.5 E_x[sum_c F_c dh_c^2]`.
    pub predicted_diagonal: [f64; 3],
    /// Per task: measured loss increase with only this block quantized.
    pub measured: [f64; 3],
    /// Mean squared block-output perturbation.
    pub perturbation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub rows: Vec<CorrelationRow>,
    /// Pearson r over blocks per task, block-level prediction (`None` when
    /// undefined).
    pub per_task: [Option<f64>; 3],
    /// Pearson r over every (block, task) pair, block-level prediction.
    pub pooled: f64,
    pub per_task_diagonal: [Option<f64>; 3],
    pub pooled_diagonal: f64,
    /// Blocks left out because their perturbation was zero.
    pub excluded: Vec<usize>,
    /// Per task factor `M_k / (2 s_k^2)` applied to the Fisher, where `M_k`
    /// is the number of target elements per sample and `s_k^2` the
    /// full-precision residual MSE on the Fisher samples.
    pub fisher_scale: [f64; 3],
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len();
    if n < 2 || n != b.len() {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut c, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        c += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    (va > 0.0 && vb > 0.0).then(|| c / (va * vb).sqrt())
}

fn correlations(
    rows: &[CorrelationRow],
    pred: impl Fn(&CorrelationRow) -> [f64; 3],
) -> Result<([Option<f64>; 3], f64)> {
    let per_task = [0, 1, 2].map(|k| {
        let p: Vec<f64> = rows.iter().map(|r| pred(r)[k]).collect();
        let m: Vec<f64> = rows.iter().map(|r| r.measured[k]).collect();
        pearson(&p, &m)
    });
    let p: Vec<f64> = rows.iter().flat_map(&pred).collect();
    let m: Vec<f64> = rows.iter().flat_map(|r| r.measured).collect();
    let pooled = pearson(&p, &m)
        .ok_or_else(|| Error::InvalidArgument("pooled correlation undefined".into()))?;
    Ok((per_task, pooled))
}

/// Quantizes one block at a time (round-to-nearest) and compares each
/// task's measured loss increase on `data` with Fisher predictions.
///
/// `fisher` is the frozen diagonal Fisher and `calib` the samples it was
/// estimated on; their per-sample gradients give the block-level form.
/// The empirical Fisher of a per-sample MSE is `(4 s^2 / M^2) J^T J` for
/// white residuals of variance `s^2`, while the loss curvature is
/// `(2 / M) J^T J`, so each task's Fisher is rescaled by `M / (2 s^2)`:
/// the Gaussian likelihood whose Fisher matches the curvature.
pub fn correlation_experiment<T: Scalar>(
    model: &ToyModel<T>,
    fisher: &FisherTensor,
    calib: &SyntheticDataset<T>,
    data: &SyntheticDataset<T>,
    wspec: QuantSpec,
    aspec: QuantSpec,
) -> Result<CorrelationReport> {
    let nl = model.num_blocks();
    if nl < 3 {
        return Err(Error::InvalidArgument(format!(
            "correlation needs at least 3 blocks, model has {}",
            nl
        )));
    }
    if fisher.blocks != nl || fisher.channels != model.config.hidden_dim {
        return Err(Error::InvalidArgument(
            "Fisher does not match the model".into(),
        ));
    }
    if fisher.objective_mode != ObjectiveMode::TaskLoss {
        return Err(Error::InvalidArgument(
            "correlation needs a task-loss Fisher".into(),
        ));
    }
    if fisher.n_samples != calib.len() {
        return Err(Error::InvalidArgument(format!(
            "Fisher has {} samples, calibration set {}",
            fisher.n_samples,
            calib.len()
        )));
    }
    let mut task_idx = [0; 3];
    for (k, &task) in Task::ALL.iter().enumerate() {
        task_idx[k] = fisher.task_index(task).ok_or_else(|| {
            Error::InvalidArgument(format!("Fisher has no {} scores", task.name()))
        })?;
    }

    let cal_fp = run_model(model, calib, &mut FullPrecision)?;
    let residual = task_loss_values(&cal_fp.outputs, &calib.targets)?.to_array();
    let t = &calib.targets;
    let per_sample = [&t.pose, &t.depth, &t.points].map(|x| (x.len() / calib.len()) as f64);
    let mut fisher_scale = [0.0; 3];
    for k in 0..3 {
        if residual[k] <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "{} residual is zero; likelihood scale undefined",
                Task::ALL[k].name()
            )));
        }
        fisher_scale[k] = per_sample[k] / (2.0 * residual[k]);
    }
    let grads = sample_gradients(model, calib, ObjectiveMode::TaskLoss)?;

    let fp = run_model(model, data, &mut FullPrecision)?;
    let base = task_loss_values(&fp.outputs, &data.targets)?.to_array();
    let c = model.config.hidden_dim;
    let mut rows = Vec::with_capacity(nl);
    let mut excluded = Vec::new();
    for l in 0..nl {
        let qm = QuantizedModel::single_block(model.clone(), l, wspec, aspec, TransformInit::None)?;
        let q = run_model(&qm.model, data, &mut qm.exec())?;
        let losses = task_loss_values(&q.outputs, &data.targets)?.to_array();
        let dh: Vec<f64> = q.hooks[l]
            .iter()
            .zip(&fp.hooks[l])
            .map(|(&a, &b)| (a - b).as_f64())
            .collect();
        let perturbation = dh.iter().map(|v| v * v).sum::<f64>() / dh.len() as f64;
        if perturbation == 0.0 {
            log::warn!("block {} has no quantization perturbation; excluded", l);
            excluded.push(l);
            continue;
        }
        let dh_t = Tensor::new(&[dh.len() / c, c], dh.clone())?;
        let mut predicted = [0.0; 3];
        let mut predicted_diagonal = [0.0; 3];
        for k in 0..3 {
            predicted_diagonal[k] =
                fisher_scale[k] * predicted_loss_increase(fisher.row(task_idx[k], l), &dh_t)?;
            let mut quad = 0.0;
            for sample in dh.chunks_exact(grads.sample_len) {
                quad += grads.quadratic_form(k, l, sample)?;
            }
            predicted[k] = 0.5 * fisher_scale[k] * quad / data.len() as f64;
        }
        rows.push(CorrelationRow {
            block: l,
            name: model.config.block_name(l),
            predicted,
            predicted_diagonal,
            measured: [0, 1, 2].map(|k| losses[k] - base[k]),
            perturbation,
        });
    }
    if rows.len() < 3 {
        return Err(Error::InvalidArgument(
            "fewer than 3 blocks with a perturbation".into(),
        ));
    }
    let (per_task, pooled) = correlations(&rows, |r| r.predicted)?;
    let (per_task_diagonal, pooled_diagonal) = correlations(&rows, |r| r.predicted_diagonal)?;
    Ok(CorrelationReport {
        rows,
        per_task,
        pooled,
        per_task_diagonal,
        pooled_diagonal,
        excluded,
        fisher_scale,
    })
}
