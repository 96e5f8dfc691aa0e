use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::fisher::npd;
use crate::model::{FullPrecision, LinearExec, SyntheticDataset, Targets, TaskOutputs, ToyModel};
use crate::qmodel::QuantizedModel;
use crate::tensor::{Tape, Tensor};
use crate::Scalar;

/// Per-sample pose error thresholds for the camera accuracy metrics.
pub const POSE_THRESHOLDS: [f64; 3] = [0.1, 0.25, 0.5];
/// Ratio bound of the depth threshold accuracy.
pub const DEPTH_DELTA: f64 = 1.25;
const EVAL_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraMetrics {
    pub rmse: f64,
    /// Fraction of samples whose pose error norm is below each threshold.
    pub accuracy: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    /// Fraction of tokens with `max(d/d*, d*/d) < 1.25`.
    pub delta1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointMetrics {
    pub mean_error: f64,
    pub median_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub camera: CameraMetrics,
    pub depth: DepthMetrics,
    pub point: PointMetrics,
}

impl Metrics {
    /// `(name, value)` of every metric in a fixed order.
    pub fn named(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("camera_rmse", self.camera.rmse),
            ("camera_acc_0.1", self.camera.accuracy[0]),
            ("camera_acc_0.25", self.camera.accuracy[1]),
            ("camera_acc_0.5", self.camera.accuracy[2]),
            ("depth_abs_rel", self.depth.abs_rel),
            ("depth_delta1", self.depth.delta1),
            ("point_mean_error", self.point.mean_error),
            ("point_median_error", self.point.median_error),
        ]
    }
}

/// Metrics of concrete predictions against targets.
pub fn compute_metrics<T: Scalar>(out: &TaskOutputs<T>, y: &Targets<T>) -> Result<Metrics> {
    for (a, b, what) in [
        (&out.pose, &y.pose, "pose"),
        (&out.depth, &y.depth, "depth"),
        (&out.points, &y.points, "points"),
    ] {
        if a.shape() != b.shape() || a.is_empty() {
            return Err(shape_err(
                "compute_metrics",
                format!("{} {:?} vs {:?}", what, a.shape(), b.shape()),
            ));
        }
    }
    let f = |t: &Tensor<T>| -> Vec<f64> { t.data().iter().map(|v| v.as_f64()).collect() };

    let (p, pt) = (f(&out.pose), f(&y.pose));
    let pd = out.pose.last_dim();
    let sq: f64 = p.iter().zip(&pt).map(|(a, b)| (a - b) * (a - b)).sum();
    let rmse = (sq / p.len() as f64).sqrt();
    let errs: Vec<f64> = p
        .chunks_exact(pd)
        .zip(pt.chunks_exact(pd))
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let accuracy =
        POSE_THRESHOLDS.map(|t| errs.iter().filter(|&&e| e < t).count() as f64 / errs.len() as f64);

    let (d, dt) = (f(&out.depth), f(&y.depth));
    let abs_rel = d
        .iter()
        .zip(&dt)
        .map(|(a, b)| (a - b).abs() / b.abs())
        .sum::<f64>()
        / d.len() as f64;
    let good = d
        .iter()
        .zip(&dt)
        .filter(|(&a, &b)| a > 0.0 && b > 0.0 && (a / b).max(b / a) < DEPTH_DELTA)
        .count();
    let delta1 = good as f64 / d.len() as f64;

    let (q, qt) = (f(&out.points), f(&y.points));
    let mut perr: Vec<f64> = q
        .chunks_exact(3)
        .zip(qt.chunks_exact(3))
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let mean_error = perr.iter().sum::<f64>() / perr.len() as f64;
    perr.sort_by(f64::total_cmp);
    let m = perr.len();
    let median_error = if m % 2 == 1 {
        perr[m / 2]
    } else {
        0.5 * (perr[m / 2 - 1] + perr[m / 2])
    };

    Ok(Metrics {
        camera: CameraMetrics { rmse, accuracy },
        depth: DepthMetrics { abs_rel, delta1 },
        point: PointMetrics {
            mean_error,
            median_error,
        },
    })
}

/// NPD of every metric against a reference run. Metrics whose reference is
/// zero have no NPD.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NpdReport {
    pub per_metric: Vec<(String, Option<f64>)>,
    /// NPD of each task's primary metric: camera RMSE, depth AbsRel and
    /// point mean error.
    pub camera: f64,
    pub depth: f64,
    pub point: f64,
}

impl NpdReport {
    pub fn max_task(&self) -> f64 {
        self.camera.max(self.depth).max(self.point)
    }

    pub fn dense_min(&self) -> f64 {
        self.depth.min(self.point)
    }
}

pub fn npd_report(q: &Metrics, fp: &Metrics) -> Result<NpdReport> {
    let per_metric = q
        .named()
        .into_iter()
        .zip(fp.named())
        .map(|((name, a), (_, b))| (name.to_string(), npd(a, b).ok()))
        .collect();
    Ok(NpdReport {
        per_metric,
        camera: npd(q.camera.rmse, fp.camera.rmse)?,
        depth: npd(q.depth.abs_rel, fp.depth.abs_rel)?,
        point: npd(q.point.mean_error, fp.point.mean_error)?,
    })
}

/// Predictions and block outputs of a model (quantized or not) on a dataset,
/// evaluated in fixed chunks.
pub(crate) struct Evaluation<T> {
    pub outputs: TaskOutputs<T>,
    /// Per block, `[samples, tokens, hidden]` flattened.
    pub hooks: Vec<Vec<T>>,
}

pub(crate) fn run_model<T: Scalar>(
    model: &ToyModel<T>,
    data: &SyntheticDataset<T>,
    exec: &mut dyn LinearExec<T>,
) -> Result<Evaluation<T>> {
    let n = data.len();
    let mut pose = Vec::new();
    let mut depth = Vec::new();
    let mut points = Vec::new();
    let mut hooks = vec![Vec::new(); model.num_blocks()];
    for lo in (0..n).step_by(EVAL_CHUNK) {
        let hi = (lo + EVAL_CHUNK).min(n);
        let (x, _) = data.range(lo, hi)?;
        let mut tape = Tape::new();
        let bm = model.bind(&mut tape, false);
        let xin = tape.constant(x);
        let tr = model.forward(&mut tape, &bm, xin, exec, false)?;
        pose.extend_from_slice(tape.value(tr.outputs.pose).data());
        depth.extend_from_slice(tape.value(tr.outputs.depth).data());
        points.extend_from_slice(tape.value(tr.outputs.points).data());
        for (acc, &h) in hooks.iter_mut().zip(&tr.hooks) {
            acc.extend_from_slice(tape.value(h).data());
        }
    }
    let t = &data.targets;
    Ok(Evaluation {
        outputs: TaskOutputs {
            pose: Tensor::new(t.pose.shape(), pose)?,
            depth: Tensor::new(t.depth.shape(), depth)?,
            points: Tensor::new(t.points.shape(), points)?,
        },
        hooks,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: Metrics,
    pub task_losses: [f64; 3],
    /// NPD against the full-precision model on the same data.
    pub npd: NpdReport,
    /// Mean squared gap between full-precision and quantized block outputs.
    pub block_loss: Vec<f64>,
}

/// Evaluates `qm` (or the plain model when `None`) against its
/// full-precision base on a held-out set.
pub fn evaluate<T: Scalar>(
    model: &ToyModel<T>,
    qm: Option<&QuantizedModel<T>>,
    data: &SyntheticDataset<T>,
) -> Result<EvalReport> {
    let fp = run_model(model, data, &mut FullPrecision)?;
    let q = match qm {
        Some(qm) => run_model(&qm.model, data, &mut qm.exec())?,
        None => run_model(model, data, &mut FullPrecision)?,
    };
    let fp_metrics = compute_metrics(&fp.outputs, &data.targets)?;
    let metrics = compute_metrics(&q.outputs, &data.targets)?;
    let losses = crate::model::task_loss_values(&q.outputs, &data.targets)?;
    let block_loss = fp
        .hooks
        .iter()
        .zip(&q.hooks)
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .map(|(x, y)| {
                    let d = x.as_f64() - y.as_f64();
                    d * d
                })
                .sum::<f64>()
                / a.len() as f64
        })
        .collect();
    Ok(EvalReport {
        npd: npd_report(&metrics, &fp_metrics)?,
        metrics,
        task_losses: losses.to_array(),
        block_loss,
    })
}
