//! Block-wise calibration of transforms and clip factors against captured
//! full-precision block outputs.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{shape_err, Error, Result};
use crate::fisher::{CalibrationWeights, WEIGHT_FLOOR};
use crate::model::{
    block_forward, gather, BoundLinear, FullPrecision, LinearExec, Slot, SyntheticDataset, ToyModel,
};
use crate::optim::{AdamW, AdamWConfig, CosineSchedule};
use crate::qmodel::{quantized_slot, QuantizedModel, TransformInit};
use crate::quant::{fake_quant, project_clip, QuantSpec};
use crate::tensor::{Tape, Tensor, Var};
use crate::transform::MAX_COND;
use crate::Scalar;

/// Lower bound kept on every diagonal scale entry.
pub const DIAG_SCALE_MIN: f64 = 1e-3;
/// Halvings tried before an ill-conditioned step is skipped.
const MAX_LR_HALVINGS: u32 = 8;
const EVAL_CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Uniform,
    Fgq,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibConfig {
    pub objective: Objective,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_transform: f64,
    pub lr_clip: f64,
    pub eta_min: f64,
    pub transform_weight_decay: f64,
    pub clip_weight_decay: f64,
    pub seed: u64,
    pub w_bits: u32,
    pub a_bits: u32,
    pub weight_floor: f64,
    /// Bytes allowed for one block's captured inputs and outputs.
    pub memory_budget: usize,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Fgq,
            epochs: 15,
            batch_size: 2,
            lr_transform: 1e-2,
            lr_clip: 1e-1,
            eta_min: 1e-5,
            transform_weight_decay: 0.01,
            clip_weight_decay: 0.0,
            seed: 42,
            w_bits: 4,
            a_bits: 4,
            weight_floor: WEIGHT_FLOOR,
            memory_budget: 256 << 20,
        }
    }
}

impl CalibConfig {
    pub fn steps_per_block(&self, nsamples: usize) -> usize {
        self.epochs * (nsamples / self.batch_size.max(1))
    }

    pub fn wspec(&self) -> QuantSpec {
        QuantSpec::weight(self.w_bits)
    }

    pub fn aspec(&self) -> QuantSpec {
        QuantSpec::activation(self.a_bits)
    }
}

/// Full-precision inputs and outputs of one block over a dataset,
/// `[samples, tokens, hidden]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockIO<T> {
    pub block: usize,
    pub inputs: Tensor<T>,
    pub outputs: Tensor<T>,
}

impl<T: Scalar> BlockIO<T> {
    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Runs the full-precision model over `data` and keeps the input and output
/// of `block`.
pub fn capture_block_io<T: Scalar>(
    model: &ToyModel<T>,
    data: &SyntheticDataset<T>,
    block: usize,
    memory_budget: usize,
) -> Result<BlockIO<T>> {
    let cfg = &model.config;
    if block >= model.num_blocks() {
        return Err(Error::InvalidArgument(format!(
            "block {} out of range",
            block
        )));
    }
    let n = data.len();
    let per = cfg.num_tokens() * cfg.hidden_dim;
    let needed = 2 * n * per * std::mem::size_of::<T>();
    if needed > memory_budget {
        return Err(Error::MemoryBudget {
            needed,
            budget: memory_budget,
        });
    }
    let mut inputs = Vec::with_capacity(n * per);
    let mut outputs = Vec::with_capacity(n * per);
    for lo in (0..n).step_by(EVAL_CHUNK) {
        let hi = (lo + EVAL_CHUNK).min(n);
        let (x, _) = data.range(lo, hi)?;
        let mut tape = Tape::new();
        let bm = model.bind(&mut tape, false);
        let xin = tape.constant(x);
        let tr = model.forward(&mut tape, &bm, xin, &mut FullPrecision, false)?;
        let before = if block == 0 {
            tr.embedded
        } else {
            tr.hooks[block - 1]
        };
        inputs.extend_from_slice(tape.value(before).data());
        outputs.extend_from_slice(tape.value(tr.hooks[block]).data());
    }
    let shape = [n, cfg.num_tokens(), cfg.hidden_dim];
    Ok(BlockIO {
        block,
        inputs: Tensor::new(&shape, inputs)?,
        outputs: Tensor::new(&shape, outputs)?,
    })
}

/// Mean squared error over tokens and channels; with `weights`, each
/// channel's error is scaled by its weight before the mean.
pub fn calibration_loss<T: Scalar>(
    tape: &mut Tape<T>,
    fp_out: Var,
    q_out: Var,
    weights: Option<Var>,
    objective: Objective,
) -> Result<Var> {
    if tape.shape(fp_out) != tape.shape(q_out) {
        return Err(shape_err(
            "calibration_loss",
            format!("{:?} vs {:?}", tape.shape(fp_out), tape.shape(q_out)),
        ));
    }
    let d = tape.sub(q_out, fp_out)?;
    let d = tape.square(d)?;
    let d = match (objective, weights) {
        (Objective::Uniform, None) => d,
        (Objective::Fgq, Some(w)) => {
            let c = *tape.shape(fp_out).last().unwrap_or(&0);
            if tape.shape(w) != [c] {
                return Err(shape_err(
                    "calibration_loss",
                    format!("weights {:?} for {} channels", tape.shape(w), c),
                ));
            }
            tape.mul(d, w)?
        }
        (Objective::Uniform, Some(_)) => {
            return Err(Error::InvalidArgument(
                "uniform objective takes no weights".into(),
            ))
        }
        (Objective::Fgq, None) => {
            return Err(Error::InvalidArgument("fgq objective needs weights".into()))
        }
    };
    tape.mean(d)
}

/// Gradient-free [`calibration_loss`] on concrete tensors.
pub fn calibration_loss_value<T: Scalar>(
    fp_out: &Tensor<T>,
    q_out: &Tensor<T>,
    weights: Option<&[f64]>,
    objective: Objective,
) -> Result<f64> {
    let mut tape = Tape::<T>::unchecked();
    let a = tape.constant(fp_out.clone());
    let b = tape.constant(q_out.clone());
    let w = weights.map(|w| tape.constant(Tensor::from_fn(&[w.len()], |i| T::lit(w[i]))));
    let l = calibration_loss(&mut tape, a, b, w, objective)?;
    Ok(tape.item(l).as_f64())
}

/// Trainable values of one slot.
#[derive(Clone, Debug, PartialEq)]
struct SlotParams<T> {
    /// `(P, diag_scale)` when the slot has a trainable transform.
    transform: Option<(Tensor<T>, Tensor<T>)>,
    act_clip: T,
    weight_clips: Vec<Tensor<T>>,
}

impl<T: Scalar> SlotParams<T> {
    fn buffers_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        if let Some((p, s)) = &mut self.transform {
            out.push(p.data_mut());
            out.push(s.data_mut());
        }
        out.push(std::slice::from_mut(&mut self.act_clip));
        for c in &mut self.weight_clips {
            out.push(c.data_mut());
        }
        out
    }

    fn project(&mut self) {
        if let Some((_, s)) = &mut self.transform {
            let lo = T::lit(DIAG_SCALE_MIN);
            for v in s.data_mut() {
                *v = v.max(lo);
            }
        }
        project_clip(std::slice::from_mut(&mut self.act_clip));
        for c in &mut self.weight_clips {
            project_clip(c.data_mut());
        }
    }

    fn effective(&self) -> Option<Tensor<T>> {
        self.transform.as_ref().map(|(p, s)| {
            let n = s.len();
            Tensor::from_fn(p.shape(), |i| p.data()[i] * s.data()[i % n])
        })
    }
}

fn read_params<T: Scalar>(qm: &QuantizedModel<T>, block: usize) -> Result<Vec<SlotParams<T>>> {
    let bq = qm.blocks[block]
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument(format!("block {} is not quantized", block)))?;
    Ok(Slot::ALL
        .iter()
        .map(|&s| {
            let sq = bq.slot(s);
            SlotParams {
                transform: sq
                    .transform()
                    .filter(|t| t.is_trainable())
                    .map(|t| (t.p().clone(), t.diag_scale().clone())),
                act_clip: sq.act_clip(),
                weight_clips: sq.weight_clips().to_vec(),
            }
        })
        .collect())
}

fn write_params<T: Scalar>(
    qm: &mut QuantizedModel<T>,
    block: usize,
    params: &[SlotParams<T>],
) -> Result<()> {
    let bq = qm.blocks[block].as_mut().expect("checked by read_params");
    for (&s, p) in Slot::ALL.iter().zip(params) {
        bq.slot_mut(s)
            .set_params(p.transform.clone(), p.act_clip, p.weight_clips.clone())?;
    }
    qm.refresh()
}

/// Tape executor whose calibration parameters are leaves of the tape.
struct CalibExec<'a> {
    block: usize,
    slots: &'a [SlotVars],
    aspec: QuantSpec,
    wspec: QuantSpec,
    mask: Arc<[bool]>,
}

#[derive(Clone, Debug)]
struct SlotVars {
    transform: Option<(Var, Var)>,
    act_clip: Var,
    weight_clips: Vec<Var>,
    /// Frozen full-precision weights.
    weights: Vec<Var>,
}

impl<T: Scalar> LinearExec<T> for CalibExec<'_> {
    fn apply(
        &mut self,
        tape: &mut Tape<T>,
        block: usize,
        slot: Slot,
        x: Var,
        linears: &[BoundLinear],
    ) -> Result<Vec<Var>> {
        debug_assert_eq!(block, self.block);
        let sv = &self.slots[slot.index()];
        let peff = match sv.transform {
            Some((p, s)) => Some(tape.mul(p, s)?),
            None => None,
        };
        let wq = sv
            .weights
            .iter()
            .zip(&sv.weight_clips)
            .map(|(&w, &clip)| {
                let w = match peff {
                    Some(p) => tape.solve(p, w, MAX_COND)?,
                    None => w,
                };
                fake_quant(tape, w, clip, self.wspec, None)
            })
            .collect::<Result<Vec<_>>>()?;
        quantized_slot(
            tape,
            x,
            peff,
            sv.act_clip,
            self.aspec,
            self.mask.clone(),
            &wq,
            linears,
        )
    }
}

/// Binds one block's parameters and runs the quantized block on a batch of
/// captured inputs; returns the loss and the parameter leaves in
/// [`SlotParams::buffers_mut`] order.
#[allow(clippy::too_many_arguments)]
fn block_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    qm: &QuantizedModel<T>,
    block: usize,
    params: &[SlotParams<T>],
    x: Tensor<T>,
    y: Tensor<T>,
    weights: Option<&[f64]>,
    objective: Objective,
    trainable: bool,
) -> Result<(Var, Vec<Var>)> {
    let blk = &qm.model.blocks[block];
    let bb = blk.bind(tape, false);
    let mut leaves = Vec::new();
    let mut slots = Vec::with_capacity(Slot::ALL.len());
    let fixed = qm.blocks[block].as_ref().expect("quantized block");
    for (&s, p) in Slot::ALL.iter().zip(params) {
        let transform = match &p.transform {
            Some((pm, ds)) => {
                let pv = tape.leaf(pm.clone(), trainable);
                let sv = tape.leaf(ds.clone(), trainable);
                leaves.push(pv);
                leaves.push(sv);
                Some((pv, sv))
            }
            // frozen (e.g. fixed Hadamard) transforms enter as constants
            None => fixed.slot(s).transform().map(|t| {
                let pv = tape.constant(t.p().clone());
                let sv = tape.constant(t.diag_scale().clone());
                (pv, sv)
            }),
        };
        let act_clip = tape.leaf(Tensor::scalar(p.act_clip), trainable);
        leaves.push(act_clip);
        let weight_clips: Vec<Var> = p
            .weight_clips
            .iter()
            .map(|c| {
                let v = tape.leaf(c.clone(), trainable);
                leaves.push(v);
                v
            })
            .collect();
        let weights = blk
            .linears(s)
            .iter()
            .map(|l| tape.constant(l.weight.clone()))
            .collect();
        slots.push(SlotVars {
            transform,
            act_clip,
            weight_clips,
            weights,
        });
    }
    let mut exec = CalibExec {
        block,
        slots: &slots,
        aspec: qm.aspec,
        wspec: qm.wspec,
        mask: qm.special_mask(),
    };
    let xin = tape.constant(x);
    let out = block_forward(tape, &qm.model.config, block, &bb, xin, &mut exec)?;
    let target = tape.constant(y);
    let w = weights.map(|w| tape.constant(Tensor::from_fn(&[w.len()], |i| T::lit(w[i]))));
    let loss = calibration_loss(tape, target, out, w, objective)?;
    Ok((loss, leaves))
}

/// Calibration loss of the model's current (cached, folded) quantized block
/// over all captured samples.
pub fn block_loss<T: Scalar>(
    qm: &QuantizedModel<T>,
    io: &BlockIO<T>,
    weights: Option<&[f64]>,
    objective: Objective,
) -> Result<f64> {
    let n = io.len();
    let blk = &qm.model.blocks[io.block];
    let mut acc = 0.0;
    for lo in (0..n).step_by(EVAL_CHUNK) {
        let hi = (lo + EVAL_CHUNK).min(n);
        let idx: Vec<usize> = (lo..hi).collect();
        let mut tape = Tape::new();
        let bb = blk.bind(&mut tape, false);
        let x = tape.constant(gather(&io.inputs, &idx)?);
        let out = block_forward(
            &mut tape,
            &qm.model.config,
            io.block,
            &bb,
            x,
            &mut qm.exec(),
        )?;
        let y = tape.constant(gather(&io.outputs, &idx)?);
        let w = weights.map(|w| tape.constant(Tensor::from_fn(&[w.len()], |i| T::lit(w[i]))));
        let l = calibration_loss(&mut tape, y, out, w, objective)?;
        acc += tape.item(l).as_f64() * (hi - lo) as f64 / n as f64;
    }
    Ok(acc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub block: usize,
    pub name: String,
    /// Calibration-set loss before the first step.
    pub initial_loss: f64,
    /// Calibration-set loss of the parameters kept.
    pub final_loss: f64,
    /// Raw minibatch loss of every optimizer step.
    pub trace: Vec<f64>,
    /// Learning-rate halvings forced by trial steps whose transform was ill
    /// conditioned.
    pub rejected_steps: usize,
    /// Whether a better earlier snapshot replaced the last parameters.
    pub restored_snapshot: bool,
}

/// Optimizes the calibration parameters of `io.block` inside `qm`.
pub fn calibrate_block<T: Scalar>(
    qm: &mut QuantizedModel<T>,
    io: &BlockIO<T>,
    weights: Option<&[f64]>,
    cfg: &CalibConfig,
) -> Result<BlockReport> {
    let block = io.block;
    let n = io.len();
    if cfg.batch_size == 0 || n < cfg.batch_size {
        return Err(Error::InvalidArgument(format!(
            "batch size {} with {} calibration samples",
            cfg.batch_size, n
        )));
    }
    let fail = |step: usize, e: Error| Error::Calibration {
        block,
        step,
        detail: e.to_string(),
    };
    let mut params = read_params(qm, block)?;
    let initial_loss = block_loss(qm, io, weights, cfg.objective)?;

    let mut opt = AdamW::<T>::new(AdamWConfig::default());
    let gt = opt.add_group(cfg.lr_transform, cfg.transform_weight_decay);
    let gc = opt.add_group(cfg.lr_clip, cfg.clip_weight_decay);
    for p in &params {
        if let Some((pm, ds)) = &p.transform {
            opt.register(gt, pm.len());
            opt.register(gt, ds.len());
        }
        opt.register(gc, 1);
        for c in &p.weight_clips {
            opt.register(gc, c.len());
        }
    }
    let steps_per_epoch = n / cfg.batch_size;
    let steps = cfg.epochs * steps_per_epoch;
    let sched = CosineSchedule {
        t_max: steps,
        eta_min: cfg.eta_min,
    };
    let mut rng =
        ChaCha8Rng::seed_from_u64(cfg.seed ^ (block as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(steps);
    let mut rejected = 0;
    let mut best = (initial_loss, params.clone());
    let mut last_loss = initial_loss;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for b in 0..steps_per_epoch {
            let step = epoch * steps_per_epoch + b;
            let idx = &order[b * cfg.batch_size..(b + 1) * cfg.batch_size];
            let mut tape = Tape::new();
            let (loss, leaves) = block_loss_on_tape(
                &mut tape,
                qm,
                block,
                &params,
                gather(&io.inputs, idx)?,
                gather(&io.outputs, idx)?,
                weights,
                cfg.objective,
                true,
            )
            .map_err(|e| fail(step, e))?;
            let raw = tape.item(loss).as_f64();
            if !raw.is_finite() {
                return Err(fail(step, Error::NonFinite(format!("loss {}", raw))));
            }
            trace.push(raw);
            if raw == 0.0 {
                continue;
            }
            // the loss divided by its own detached value
            let normalized = tape.scale(loss, T::lit(1.0 / raw))?;
            tape.backward(normalized).map_err(|e| fail(step, e))?;
            let grads: Vec<Vec<T>> = leaves
                .iter()
                .map(|&v| tape.grad_tensor(v).into_data())
                .collect();
            let grads: Vec<&[T]> = grads.iter().map(|g| g.as_slice()).collect();
            sched.apply(&mut opt, step);

            let mut lr_scale = 1.0;
            let mut halvings = 0;
            loop {
                let mut trial = params.clone();
                let mut trial_opt = opt.clone();
                trial_opt.step(
                    &mut trial
                        .iter_mut()
                        .flat_map(|p| p.buffers_mut())
                        .collect::<Vec<_>>(),
                    &grads,
                    lr_scale,
                );
                trial.iter_mut().for_each(|p| p.project());
                if well_conditioned(&trial)? {
                    params = trial;
                    opt = trial_opt;
                    break;
                }
                rejected += 1;
                halvings += 1;
                if halvings > MAX_LR_HALVINGS {
                    log::warn!(
                        "block {} step {}: transform stays ill-conditioned, step skipped",
                        block,
                        step
                    );
                    break;
                }
                lr_scale *= 0.5;
            }
        }
        write_params(qm, block, &params)?;
        last_loss = block_loss(qm, io, weights, cfg.objective)?;
        if !last_loss.is_finite() {
            return Err(fail(
                (epoch + 1) * steps_per_epoch,
                Error::NonFinite(format!("loss {}", last_loss)),
            ));
        }
        if last_loss < best.0 {
            best = (last_loss, params.clone());
        }
    }

    let mut restored = false;
    let final_loss = if last_loss > best.0 {
        log::info!(
            "block {}: restoring snapshot with loss {:.4e} over final {:.4e}",
            block,
            best.0,
            last_loss
        );
        write_params(qm, block, &best.1)?;
        restored = true;
        best.0
    } else {
        write_params(qm, block, &params)?;
        last_loss
    };
    Ok(BlockReport {
        block,
        name: qm.model.config.block_name(block),
        initial_loss,
        final_loss,
        trace,
        rejected_steps: rejected,
        restored_snapshot: restored,
    })
}

fn well_conditioned<T: Scalar>(params: &[SlotParams<T>]) -> Result<bool> {
    for p in params {
        if let Some(e) = p.effective() {
            let n = e.shape()[0];
            match crate::tensor::linalg::condition_estimate(e.data(), n) {
                Ok(c) if c <= MAX_COND => {}
                Ok(_) | Err(Error::IllConditioned(_)) => return Ok(false),
                Err(e) => return Err(e),
            }
        }
    }
    Ok(true)
}

/// Gradients of the raw and the self-normalized loss of one batch, as
/// flat vectors, together with the raw loss value.
pub fn normalization_gradients<T: Scalar>(
    qm: &QuantizedModel<T>,
    io: &BlockIO<T>,
    idx: &[usize],
    weights: Option<&[f64]>,
    objective: Objective,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let params = read_params(qm, io.block)?;
    let run = |normalize: bool| -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let (loss, leaves) = block_loss_on_tape(
            &mut tape,
            qm,
            io.block,
            &params,
            gather(&io.inputs, idx)?,
            gather(&io.outputs, idx)?,
            weights,
            objective,
            true,
        )?;
        let raw = tape.item(loss).as_f64();
        let root = if normalize {
            tape.scale(loss, T::lit(1.0 / raw))?
        } else {
            loss
        };
        tape.backward(root)?;
        let g = leaves
            .iter()
            .flat_map(|&v| tape.grad_tensor(v).into_data())
            .map(|v| v.as_f64())
            .collect();
        Ok((raw, g))
    };
    let (raw, g_raw) = run(false)?;
    let (_, g_norm) = run(true)?;
    Ok((raw, g_raw, g_norm))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibReport {
    pub objective: Objective,
    pub steps_per_block: usize,
    pub blocks: Vec<BlockReport>,
}

/// SHA-256 over the base model and the calibration parameters of every
/// block except `exclude`.
pub fn parameter_checksum<T: Scalar>(qm: &QuantizedModel<T>, exclude: Option<usize>) -> String {
    let mut h = Sha256::new();
    let mut feed = |t: &[T]| {
        for v in t {
            h.update(v.as_f64().to_le_bytes());
        }
    };
    for (_, p) in qm.model.named_params() {
        feed(p.data());
    }
    for (b, bq) in qm.blocks.iter().enumerate() {
        if Some(b) == exclude {
            continue;
        }
        let Some(bq) = bq else { continue };
        for &s in &Slot::ALL {
            let sq = bq.slot(s);
            if let Some(t) = sq.transform() {
                feed(t.p().data());
                feed(t.diag_scale().data());
            }
            feed(&[sq.act_clip()]);
            for c in sq.weight_clips() {
                feed(c.data());
            }
        }
    }
    hex::encode(h.finalize())
}

/// Calibrates every block in order on full-precision captured inputs.
/// `weights` is required for the `fgq` objective and ignored otherwise.
pub fn calibrate_model<T: Scalar>(
    model: &ToyModel<T>,
    data: &SyntheticDataset<T>,
    weights: Option<&CalibrationWeights>,
    cfg: &CalibConfig,
) -> Result<(QuantizedModel<T>, CalibReport)> {
    let mut qm = QuantizedModel::new(
        model.clone(),
        cfg.wspec(),
        cfg.aspec(),
        TransformInit::Identity,
    )?;
    let report = calibrate_quantized(&mut qm, data, weights, cfg)?;
    Ok((qm, report))
}

/// [`calibrate_model`] on an existing quantized view, keeping its transform
/// kinds.
pub fn calibrate_quantized<T: Scalar>(
    qm: &mut QuantizedModel<T>,
    data: &SyntheticDataset<T>,
    weights: Option<&CalibrationWeights>,
    cfg: &CalibConfig,
) -> Result<CalibReport> {
    let nl = qm.model.num_blocks();
    let weights = match cfg.objective {
        Objective::Uniform => None,
        Objective::Fgq => {
            let w = weights.ok_or_else(|| {
                Error::InvalidArgument("fgq objective needs calibration weights".into())
            })?;
            if w.blocks != nl || w.channels != qm.model.config.hidden_dim {
                return Err(shape_err(
                    "calibrate_model",
                    format!("weights {}x{}", w.blocks, w.channels),
                ));
            }
            Some(w)
        }
    };
    let mut blocks = Vec::with_capacity(nl);
    for b in 0..nl {
        if qm.blocks[b].is_none() {
            continue;
        }
        let io = capture_block_io(&qm.model, data, b, cfg.memory_budget)?;
        let others = parameter_checksum(qm, Some(b));
        let r = calibrate_block(qm, &io, weights.map(|w| w.row(b)), cfg)?;
        if parameter_checksum(qm, Some(b)) != others {
            return Err(Error::Calibration {
                block: b,
                step: r.trace.len(),
                detail: "parameters outside the block changed".into(),
            });
        }
        log::info!(
            "calibrated {}: {:.4e} -> {:.4e}",
            r.name,
            r.initial_loss,
            r.final_loss
        );
        blocks.push(r);
    }
    Ok(CalibReport {
        objective: cfg.objective,
        steps_per_block: cfg.steps_per_block(data.len()),
        blocks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_dataset, ToyModelConfig};

    fn small() -> (ToyModel<f64>, SyntheticDataset<f64>) {
        let cfg = ToyModelConfig {
            tokens_per_view: 4,
            hidden_dim: 8,
            mlp_dim: 16,
            aa_pairs: 1,
            ..Default::default()
        };
        let model = ToyModel::new(cfg.clone()).unwrap();
        let data = generate_dataset(&cfg, 8, 3).unwrap();
        (model, data)
    }

    #[test]
    fn loss_hand_example() {
        let fp = Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap();
        let q = Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap();
        let l = calibration_loss_value(&fp, &q, Some(&[0.5, 1.5]), Objective::Fgq).unwrap();
        assert_eq!(l, 1.0);
        assert_eq!(
            calibration_loss_value(&fp, &fp, None, Objective::Uniform).unwrap(),
            0.0
        );
        let q = Tensor::new(&[1, 2], vec![0.3, -1.7]).unwrap();
        assert_eq!(
            calibration_loss_value(&fp, &q, Some(&[1.0, 1.0]), Objective::Fgq).unwrap(),
            calibration_loss_value(&fp, &q, None, Objective::Uniform).unwrap()
        );
        assert!(calibration_loss_value(&fp, &q, None, Objective::Fgq).is_err());
        assert!(calibration_loss_value(&fp, &q, Some(&[1.0, 1.0]), Objective::Uniform).is_err());
    }

    #[test]
    fn capture_is_coherent_and_budgeted() {
        let (model, data) = small();
        let io = capture_block_io(&model, &data, 1, usize::MAX).unwrap();
        assert_eq!(io.outputs.shape(), &[8, 10, 8]);
        assert_eq!(io, capture_block_io(&model, &data, 1, usize::MAX).unwrap());
        let mut tape = Tape::new();
        let bb = model.blocks[1].bind(&mut tape, false);
        let x = tape.constant(io.inputs.clone());
        let y = block_forward(&mut tape, &model.config, 1, &bb, x, &mut FullPrecision).unwrap();
        assert_eq!(tape.value(y), &io.outputs);
        assert!(matches!(
            capture_block_io(&model, &data, 0, 100),
            Err(Error::MemoryBudget { .. })
        ));
    }

    #[test]
    fn w16a16_calibration_stays_equivalent() {
        let (model, data) = small();
        let cfg = CalibConfig {
            objective: Objective::Uniform,
            epochs: 1,
            w_bits: 16,
            a_bits: 16,
            ..Default::default()
        };
        let (qm, rep) = calibrate_model(&model, &data, None, &cfg).unwrap();
        for r in &rep.blocks {
            assert!(r.initial_loss <= 1e-12);
            assert_eq!(r.trace.len(), 4);
        }
        let a = qm.predict(&data.inputs).unwrap();
        let b = model.predict(&data.inputs).unwrap();
        assert!(crate::tensor::rel_error(a.points.data(), b.points.data()) <= 1e-8);
    }

    #[test]
    fn short_w4a4_run_improves_and_is_isolated() {
        let (model, data) = small();
        let cfg = CalibConfig {
            objective: Objective::Uniform,
            epochs: 2,
            ..Default::default()
        };
        let (qm, rep) = calibrate_model(&model, &data, None, &cfg).unwrap();
        for r in &rep.blocks {
            assert!(r.final_loss <= r.initial_loss);
        }
        let (qm2, rep2) = calibrate_model(&model, &data, None, &cfg).unwrap();
        assert_eq!(rep, rep2);
        assert_eq!(
            parameter_checksum(&qm, None),
            parameter_checksum(&qm2, None)
        );
    }
}
