//! Signed 4-bit storage and an integer GEMM for quantized blocks, plus a
//! latency breakdown against the fake-quantized float path.
//!
//! Nibble layout: byte `j` of a row holds column `2j` in its low nibble and
//! column `2j + 1` in its high nibble, both two's complement. An odd
//! trailing column is padded with zero.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use half::f16;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::io::{read_container, write_container};
use crate::model::{
    block_forward, BoundLinear, FullPrecision, LinearExec, Slot, ToyModel, ToyModelConfig,
};
use crate::qmodel::QuantizedModel;
use crate::quant::{qmax, quantize, Granularity, QuantSpec};
use crate::tensor::{Tape, Tensor, Var};
use crate::Scalar;

pub const PACKED_MAGIC: &[u8; 8] = b"FGQPACK1";
const INT4_MAX: i32 = 7;
/// Shortest interval a single timing sample may cover before the
/// repetition count is raised.
const MIN_SAMPLE: Duration = Duration::from_micros(200);
const MAX_INNER: usize = 1 << 16;

/// Packs row-major `[rows, cols]` codes in `[-7, 7]`.
pub fn pack_int4(codes: &[i32], rows: usize, cols: usize) -> Result<Vec<u8>> {
    if codes.len() != rows * cols {
        return Err(shape_err(
            "pack_int4",
            format!("{} codes for {}x{}", codes.len(), rows, cols),
        ));
    }
    if let Some(&value) = codes.iter().find(|v| v.abs() > INT4_MAX) {
        return Err(Error::CodeRange { value, bits: 4 });
    }
    let stride = cols.div_ceil(2);
    let mut out = vec![0u8; rows * stride];
    for (r, row) in codes.chunks_exact(cols.max(1)).enumerate().take(rows) {
        for (j, pair) in row.chunks(2).enumerate() {
            let lo = (pair[0] as u8) & 0x0f;
            let hi = pair.get(1).map_or(0, |&v| (v as u8) & 0x0f);
            out[r * stride + j] = lo | (hi << 4);
        }
    }
    Ok(out)
}

#[inline]
fn nibble(v: u8) -> i8 {
    ((v << 4) as i8) >> 4
}

/// Inverse of [`pack_int4`]; rejects the unused code `-8`.
pub fn unpack_int4(bytes: &[u8], rows: usize, cols: usize) -> Result<Vec<i8>> {
    let stride = cols.div_ceil(2);
    if bytes.len() != rows * stride {
        return Err(shape_err(
            "unpack_int4",
            format!("{} bytes for {}x{}", bytes.len(), rows, cols),
        ));
    }
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let b = bytes[r * stride + c / 2];
            let v = if c % 2 == 0 {
                nibble(b)
            } else {
                nibble(b >> 4)
            };
            if v == -8 {
                return Err(Error::CodeRange { value: -8, bits: 4 });
            }
            out.push(v);
        }
        if cols % 2 == 1 && bytes[r * stride + stride - 1] >> 4 != 0 {
            return Err(Error::Format(format!("row {} has a nonzero pad nibble", r)));
        }
    }
    Ok(out)
}

/// 4-bit weights stored output-channel-major: row `o` holds the codes of
/// output channel `o` over all inputs, with one scale per row.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedMatrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub bytes: Vec<u8>,
    pub scales: Vec<T>,
}

impl<T: Scalar> PackedMatrix<T> {
    pub fn from_codes(codes: &[i32], rows: usize, cols: usize, scales: Vec<T>) -> Result<Self> {
        if scales.len() != rows {
            return Err(shape_err(
                "PackedMatrix",
                format!("{} scales for {} rows", scales.len(), rows),
            ));
        }
        Ok(Self {
            rows,
            cols,
            bytes: pack_int4(codes, rows, cols)?,
            scales,
        })
    }

    /// Quantizes an `[in, out]` weight per output channel at 4 bits.
    pub fn quantize_weight(w: &Tensor<T>, clip: &[T]) -> Result<Self> {
        if w.rank() != 2 {
            return Err(shape_err(
                "PackedMatrix",
                format!("weight must be 2-D, got {:?}", w.shape()),
            ));
        }
        let (inp, out) = (w.shape()[0], w.shape()[1]);
        let q = quantize(w, QuantSpec::weight(4), clip)?;
        let (codes, scales) = (q.codes().expect("4-bit"), q.scales().expect("4-bit"));
        let mut t = vec![0i32; inp * out];
        for i in 0..inp {
            for o in 0..out {
                t[o * inp + i] = codes[i * out + o];
            }
        }
        Self::from_codes(&t, out, inp, scales.to_vec())
    }

    pub fn codes(&self) -> Result<Vec<i8>> {
        unpack_int4(&self.bytes, self.rows, self.cols)
    }

    /// Dequantized weight in the `[in, out]` layout.
    pub fn dequantize(&self) -> Result<Tensor<T>> {
        let codes = self.codes()?;
        Ok(Tensor::from_fn(&[self.cols, self.rows], |k| {
            let (i, o) = (k / self.rows, k % self.rows);
            T::lit(codes[o * self.cols + i] as f64) * self.scales[o]
        }))
    }
}

/// Per-token activation codes (at most 8 bits) with one scale per token.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedActivations<T> {
    pub rows: usize,
    pub cols: usize,
    pub bits: u32,
    pub codes: Vec<i8>,
    pub scales: Vec<T>,
}

impl<T: Scalar> QuantizedActivations<T> {
    /// Quantizes the rows of a `[rows, cols]` matrix with a shared clip.
    pub fn quantize(x: &Tensor<T>, bits: u32, clip: T) -> Result<Self> {
        if !(2..=8).contains(&bits) {
            return Err(Error::InvalidArgument(format!(
                "packed activations need 2..=8 bits, got {}",
                bits
            )));
        }
        if x.rank() != 2 {
            return Err(shape_err(
                "QuantizedActivations",
                format!("expected 2-D, got {:?}", x.shape()),
            ));
        }
        let q = quantize(x, QuantSpec::new(bits, Granularity::PerToken)?, &[clip])?;
        Ok(Self {
            rows: x.shape()[0],
            cols: x.shape()[1],
            bits,
            codes: q
                .codes()
                .expect("quantized")
                .iter()
                .map(|&c| c as i8)
                .collect(),
            scales: q.scales().expect("quantized").to_vec(),
        })
    }
}

/// Fails unless every dot product of `cols` terms fits an `i32` at the
/// given bit-widths.
pub fn accumulator_guard(cols: usize, w_bits: u32, a_bits: u32) -> Result<()> {
    let bound = cols as i128 * qmax(w_bits) as i128 * qmax(a_bits) as i128;
    if bound > i32::MAX as i128 {
        return Err(Error::AccumulatorGuard(format!(
            "{} terms of {}x{}-bit products can reach {}",
            cols, w_bits, a_bits, bound
        )));
    }
    Ok(())
}

fn check_dims<T>(w: &PackedMatrix<T>, a: &QuantizedActivations<T>) -> Result<()> {
    if w.cols != a.cols {
        return Err(shape_err(
            "qgemm",
            format!(
                "weight takes {} inputs, activations have {}",
                w.cols, a.cols
            ),
        ));
    }
    accumulator_guard(w.cols, 4, a.bits)
}

fn qgemm_rows<T: Scalar>(
    wc: &[i8],
    w: &PackedMatrix<T>,
    a: &QuantizedActivations<T>,
    t0: usize,
    out: &mut [T],
) {
    let (n, k) = (w.rows, w.cols);
    for (r, orow) in out.chunks_exact_mut(n).enumerate() {
        let t = t0 + r;
        let xa = &a.codes[t * k..(t + 1) * k];
        for (o, y) in orow.iter_mut().enumerate() {
            let wr = &wc[o * k..(o + 1) * k];
            let acc: i32 = xa.iter().zip(wr).map(|(&x, &v)| x as i32 * v as i32).sum();
            *y = T::lit(acc as f64) * (a.scales[t] * w.scales[o]);
        }
    }
}

/// `[tokens, out]` result of integer dot products scaled by
/// `a_scale[t] * w_scale[o]`, with the token rows split into chunks of
/// `rows_per_task` across the rayon pool.
pub fn qgemm_partitioned<T: Scalar>(
    w: &PackedMatrix<T>,
    a: &QuantizedActivations<T>,
    rows_per_task: usize,
) -> Result<Tensor<T>> {
    check_dims(w, a)?;
    let wc = w.codes()?;
    let mut out = vec![T::zero(); a.rows * w.rows];
    let per = rows_per_task.max(1);
    out.par_chunks_mut(per * w.rows.max(1))
        .enumerate()
        .for_each(|(i, chunk)| qgemm_rows(&wc, w, a, i * per, chunk));
    Tensor::new(&[a.rows, w.rows], out)
}

pub fn qgemm<T: Scalar>(w: &PackedMatrix<T>, a: &QuantizedActivations<T>) -> Result<Tensor<T>> {
    let per = a.rows.div_ceil(rayon::current_num_threads()).max(1);
    qgemm_partitioned(w, a, per)
}

/// Packed form of one quantized slot.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedSlot<T> {
    /// Effective transform `P diag(s)`, applied in floating point.
    pub transform: Option<Tensor<T>>,
    pub act_clip: T,
    pub linears: Vec<PackedMatrix<T>>,
}

/// A quantized model whose calibrated blocks hold packed weights.
#[derive(Clone, Debug)]
pub struct PackedModel<T> {
    pub model: ToyModel<T>,
    pub aspec: QuantSpec,
    /// Per block, per slot; `None` for full-precision blocks.
    pub blocks: Vec<Option<Vec<PackedSlot<T>>>>,
}

impl<T: Scalar> PackedModel<T> {
    pub fn from_quantized(qm: &QuantizedModel<T>) -> Result<Self> {
        if qm.wspec.bits != 4 || qm.wspec.granularity != Granularity::PerOutputChannel {
            return Err(Error::InvalidArgument(format!(
                "packing needs per-channel 4-bit weights, got {:?}",
                qm.wspec
            )));
        }
        if !(2..=8).contains(&qm.aspec.bits) || qm.aspec.granularity != Granularity::PerToken {
            return Err(Error::InvalidArgument(format!(
                "packing needs per-token 2..=8-bit activations, got {:?}",
                qm.aspec
            )));
        }
        let mut blocks = Vec::with_capacity(qm.blocks.len());
        for (l, bq) in qm.blocks.iter().enumerate() {
            let Some(bq) = bq else {
                blocks.push(None);
                continue;
            };
            let blk = &qm.model.blocks[l];
            let mut slots = Vec::with_capacity(Slot::ALL.len());
            for s in Slot::ALL {
                let sq = bq.slot(s);
                let linears = blk
                    .linears(s)
                    .iter()
                    .zip(sq.weight_clips())
                    .map(|(lin, clip)| {
                        let w = match sq.transform() {
                            Some(t) => t.fold(&lin.weight)?,
                            None => lin.weight.clone(),
                        };
                        PackedMatrix::quantize_weight(&w, clip.data())
                    })
                    .collect::<Result<_>>()?;
                slots.push(PackedSlot {
                    transform: sq.transform().map(|t| t.effective()),
                    act_clip: sq.act_clip(),
                    linears,
                });
            }
            blocks.push(Some(slots));
        }
        Ok(Self {
            model: qm.model.clone(),
            aspec: qm.aspec,
            blocks,
        })
    }

    pub fn exec(&self) -> PackedExec<'_, T> {
        PackedExec {
            pm: self,
            mask: self.model.config.special_token_mask(),
        }
    }

    pub fn predict(&self, inputs: &Tensor<T>) -> Result<crate::model::TaskOutputs<T>> {
        self.model.predict_with(inputs, &mut self.exec())
    }

    /// Packed weight bytes of every quantized linear.
    pub fn packed_bytes(&self) -> usize {
        self.blocks
            .iter()
            .flatten()
            .flatten()
            .flat_map(|s| &s.linears)
            .map(|m| m.bytes.len())
            .sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    /// Header: config, activation spec and per-slot scales, clips and
    /// transforms. Payload: the packed bytes of every linear in order.
    /// The base model's float parameters are not stored.
    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        let mut payload = Vec::new();
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                b.as_ref().map(|slots| {
                    slots
                        .iter()
                        .map(|s| SlotHeader {
                            transform: s.transform.as_ref().map(|t| t.to_f64_vec()),
                            act_clip: s.act_clip.as_f64(),
                            linears: s
                                .linears
                                .iter()
                                .map(|m| {
                                    payload.extend_from_slice(&m.bytes);
                                    MatrixHeader {
                                        rows: m.rows,
                                        cols: m.cols,
                                        scales: m.scales.iter().map(|v| v.as_f64()).collect(),
                                    }
                                })
                                .collect(),
                        })
                        .collect()
                })
            })
            .collect();
        let header = PackedHeader {
            config: self.model.config.clone(),
            aspec: self.aspec,
            blocks,
        };
        write_container(w, PACKED_MAGIC, &header, &payload)
    }

    /// Restores packed blocks on top of `model`, which supplies the
    /// unquantized parameters.
    pub fn load(model: ToyModel<T>, path: &Path) -> Result<Self> {
        Self::read(
            model,
            &mut std::io::BufReader::new(std::fs::File::open(path)?),
        )
    }

    pub fn read(model: ToyModel<T>, r: &mut impl Read) -> Result<Self> {
        let (h, payload): (PackedHeader, Vec<u8>) = read_container(r, PACKED_MAGIC)?;
        if h.config != model.config {
            return Err(Error::Format(
                "packed checkpoint was written for a different model config".into(),
            ));
        }
        if h.blocks.len() != model.num_blocks() {
            return Err(Error::Format(format!(
                "{} blocks in file, model has {}",
                h.blocks.len(),
                model.num_blocks()
            )));
        }
        let mut off = 0;
        let mut blocks = Vec::with_capacity(h.blocks.len());
        for (l, b) in h.blocks.into_iter().enumerate() {
            let Some(slots) = b else {
                blocks.push(None);
                continue;
            };
            if slots.len() != Slot::ALL.len() {
                return Err(Error::Format(format!(
                    "block {} has {} slots",
                    l,
                    slots.len()
                )));
            }
            let mut out = Vec::with_capacity(slots.len());
            for (s, sh) in Slot::ALL.into_iter().zip(slots) {
                let lins = model.blocks[l].linears(s);
                if sh.linears.len() != lins.len() {
                    return Err(Error::Format(format!(
                        "block {} slot {} has {} linears",
                        l,
                        s.name(),
                        sh.linears.len()
                    )));
                }
                let dim = s.input_dim(&model.config);
                let mut linears = Vec::with_capacity(sh.linears.len());
                for (mh, lin) in sh.linears.into_iter().zip(lins) {
                    if mh.rows != lin.out_dim()
                        || mh.cols != lin.in_dim()
                        || mh.scales.len() != mh.rows
                    {
                        return Err(Error::Format(format!(
                            "block {} slot {} matrix dims disagree with the model",
                            l,
                            s.name()
                        )));
                    }
                    let n = mh.rows * mh.cols.div_ceil(2);
                    let bytes = payload
                        .get(off..off + n)
                        .ok_or_else(|| Error::Format("packed payload truncated".into()))?
                        .to_vec();
                    off += n;
                    unpack_int4(&bytes, mh.rows, mh.cols)?;
                    linears.push(PackedMatrix {
                        rows: mh.rows,
                        cols: mh.cols,
                        bytes,
                        scales: mh.scales.iter().map(|&v| T::lit(v)).collect(),
                    });
                }
                let transform = match sh.transform {
                    Some(t) => Some(Tensor::new(
                        &[dim, dim],
                        t.into_iter().map(T::lit).collect(),
                    )?),
                    None => None,
                };
                out.push(PackedSlot {
                    transform,
                    act_clip: T::lit(sh.act_clip),
                    linears,
                });
            }
            blocks.push(Some(out));
        }
        if off != payload.len() {
            return Err(Error::Format(format!(
                "{} trailing payload bytes",
                payload.len() - off
            )));
        }
        Ok(Self {
            model,
            aspec: h.aspec,
            blocks,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct MatrixHeader {
    rows: usize,
    cols: usize,
    scales: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SlotHeader {
    transform: Option<Vec<f64>>,
    act_clip: f64,
    linears: Vec<MatrixHeader>,
}

#[derive(Serialize, Deserialize)]
struct PackedHeader {
    config: ToyModelConfig,
    aspec: QuantSpec,
    blocks: Vec<Option<Vec<SlotHeader>>>,
}

/// Runs one packed slot on `[tokens, in]` inputs. Special-token rows skip
/// activation quantization and use the dequantized weights in float.
fn packed_slot<T: Scalar>(
    slot: &PackedSlot<T>,
    aspec: QuantSpec,
    mask: &[bool],
    x: &Tensor<T>,
    biases: &[&[T]],
) -> Result<Vec<Tensor<T>>> {
    let xt = match &slot.transform {
        Some(p) => x.matmul(p)?,
        None => x.clone(),
    };
    let qa = QuantizedActivations::quantize(&xt, aspec.bits, slot.act_clip)?;
    let (rows, cols) = (qa.rows, qa.cols);
    slot.linears
        .iter()
        .zip(biases)
        .map(|(w, b)| {
            let mut y = qgemm(w, &qa)?;
            let special: Vec<usize> = (0..rows).filter(|&t| mask[t % mask.len()]).collect();
            if !special.is_empty() {
                let wd = w.dequantize()?;
                let n = w.rows;
                for t in special {
                    let xr = &xt.data()[t * cols..(t + 1) * cols];
                    let yr = &mut y.data_mut()[t * n..(t + 1) * n];
                    for (o, v) in yr.iter_mut().enumerate() {
                        *v = xr
                            .iter()
                            .enumerate()
                            .fold(T::zero(), |acc, (i, &xi)| acc + xi * wd.data()[i * n + o]);
                    }
                }
            }
            for row in y.data_mut().chunks_exact_mut(w.rows) {
                row.iter_mut().zip(b.iter()).for_each(|(v, &bb)| *v += bb);
            }
            Ok(y)
        })
        .collect()
}

/// Inference executor over packed blocks. Values leave the tape as
/// constants, so it records no gradients.
pub struct PackedExec<'a, T> {
    pm: &'a PackedModel<T>,
    mask: Arc<[bool]>,
}

impl<T: Scalar> LinearExec<T> for PackedExec<'_, T> {
    fn apply(
        &mut self,
        tape: &mut Tape<T>,
        block: usize,
        slot: Slot,
        x: Var,
        linears: &[BoundLinear],
    ) -> Result<Vec<Var>> {
        let Some(slots) = self.pm.blocks.get(block).and_then(|b| b.as_ref()) else {
            return FullPrecision.apply(tape, block, slot, x, linears);
        };
        let shape = tape.shape(x).to_vec();
        let cols = *shape.last().unwrap_or(&0);
        let x2 = tape
            .value(x)
            .clone()
            .reshape(&[tape.value(x).len() / cols.max(1), cols])?;
        let biases: Vec<&[T]> = linears.iter().map(|l| tape.value(l.b).data()).collect();
        let ys = packed_slot(
            &slots[slot.index()],
            self.pm.aspec,
            &self.mask,
            &x2,
            &biases,
        )?;
        ys.into_iter()
            .map(|y| {
                let mut s = shape.clone();
                *s.last_mut().expect("rank >= 1") = y.shape()[1];
                Ok(tape.constant(y.reshape(&s)?))
            })
            .collect()
    }
}

/// Median seconds of one component, from `reps` timed samples of `inner`
/// back-to-back calls each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub param_load_s: f64,
    pub compute_s: f64,
    pub block_total_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub block: usize,
    pub tokens: usize,
    pub reps: usize,
    /// Calls per timed sample, raised until a sample spans the timer floor.
    pub inner: usize,
    pub packed: Timings,
    /// Fake-quantized float path with weights stored as f16.
    pub fake_quant: Timings,
    /// `fake_quant / packed` per component.
    pub speedup: Timings,
    pub packed_weight_bytes: usize,
    pub f16_weight_bytes: usize,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median per-call time of `f`, with the batch size doubled until each
/// sample lasts at least [`MIN_SAMPLE`].
fn time_median(reps: usize, inner: &mut usize, f: &mut dyn FnMut() -> Result<()>) -> Result<f64> {
    loop {
        let t = Instant::now();
        for _ in 0..*inner {
            f()?;
        }
        if t.elapsed() >= MIN_SAMPLE || *inner >= MAX_INNER {
            break;
        }
        *inner *= 2;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        for _ in 0..*inner {
            f()?;
        }
        samples.push(t.elapsed().as_secs_f64() / *inner as f64);
    }
    Ok(median(samples))
}

/// Latency of one block on `x` (`[batch, tokens, hidden]`), split into
/// parameter loading, the slot kernels (transform, activation quantization
/// and quantized linears) and the whole block including loading. Both the
/// packed path and the fake-quantized baseline are measured.
pub fn bench_block<T: Scalar>(
    qm: &QuantizedModel<T>,
    block: usize,
    x: &Tensor<T>,
    reps: usize,
) -> Result<LatencyReport> {
    if reps < 10 {
        return Err(Error::InvalidArgument(format!(
            "need at least 10 repetitions, got {}",
            reps
        )));
    }
    if qm.blocks.get(block).and_then(|b| b.as_ref()).is_none() {
        return Err(Error::InvalidArgument(format!(
            "block {} is not quantized",
            block
        )));
    }
    let pm = PackedModel::from_quantized(qm)?;
    let slots = pm.blocks[block].as_ref().expect("quantized block");
    let cfg = &qm.model.config;
    let blk = &qm.model.blocks[block];
    let tokens = x.len() / cfg.hidden_dim.max(1);

    // Stored parameters: packed nibbles, and f16 copies of the folded
    // fake-quantized weights for the baseline.
    let stored_packed: Vec<Vec<u8>> = slots
        .iter()
        .flat_map(|s| s.linears.iter().map(|m| m.bytes.clone()))
        .collect();
    let bq = qm.blocks[block].as_ref().expect("quantized block");
    let stored_f16: Vec<Vec<f16>> = Slot::ALL
        .iter()
        .flat_map(|&s| {
            bq.slot(s)
                .quantized_weights()
                .map(|ws| ws.to_vec())
                .unwrap_or_default()
        })
        .map(|w| w.data().iter().map(|v| f16::from_f64(v.as_f64())).collect())
        .collect();
    let packed_weight_bytes: usize = stored_packed.iter().map(Vec::len).sum();
    let f16_weight_bytes: usize = stored_f16.iter().map(|w| w.len() * 2).sum();

    let load_packed = || -> Result<Vec<Vec<i8>>> {
        let mut out = Vec::with_capacity(stored_packed.len());
        for (bytes, m) in stored_packed
            .iter()
            .zip(slots.iter().flat_map(|s| &s.linears))
        {
            out.push(unpack_int4(bytes, m.rows, m.cols)?);
        }
        Ok(out)
    };
    let load_f16 = || -> Vec<Vec<T>> {
        stored_f16
            .iter()
            .map(|w| w.iter().map(|v| T::lit(v.to_f64())).collect())
            .collect()
    };

    // Slot inputs for the kernel timings come from one FP pass of the block.
    let mut inputs = Vec::with_capacity(Slot::ALL.len());
    {
        let mut rec = Recorder {
            inputs: &mut inputs,
        };
        let mut tape = Tape::new();
        let bb = blk.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        block_forward(&mut tape, cfg, block, &bb, xv, &mut rec)?;
    }
    let biases: Vec<Vec<Vec<T>>> = Slot::ALL
        .iter()
        .map(|&s| {
            blk.linears(s)
                .iter()
                .map(|l| l.bias.data().to_vec())
                .collect()
        })
        .collect();
    let mask = cfg.special_token_mask();

    let mut inner = 1;
    let mut sink = 0usize;
    let packed_load = time_median(reps, &mut inner, &mut || {
        sink ^= load_packed()?.len();
        Ok(())
    })?;
    let mut inner_f = 1;
    let fake_load = time_median(reps, &mut inner_f, &mut || {
        sink ^= load_f16().len();
        Ok(())
    })?;
    inner = inner.max(inner_f);

    let packed_compute = time_median(reps, &mut inner, &mut || {
        for (i, s) in slots.iter().enumerate() {
            let b: Vec<&[T]> = biases[i].iter().map(Vec::as_slice).collect();
            sink ^= packed_slot(s, pm.aspec, &mask, &inputs[i], &b)?.len();
        }
        Ok(())
    })?;
    let fake_compute = time_median(reps, &mut inner, &mut || {
        let mut exec = qm.exec();
        for (i, &s) in Slot::ALL.iter().enumerate() {
            let mut tape = Tape::new();
            let xv = tape.constant(inputs[i].clone());
            let lins: Vec<BoundLinear> = blk
                .linears(s)
                .iter()
                .map(|l| l.bind(&mut tape, false))
                .collect();
            sink ^= exec.apply(&mut tape, block, s, xv, &lins)?.len();
        }
        Ok(())
    })?;

    let run_block = |exec: &mut dyn LinearExec<T>| -> Result<()> {
        let mut tape = Tape::new();
        let bb = blk.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        block_forward(&mut tape, cfg, block, &bb, xv, exec)?;
        Ok(())
    };
    let packed_total = time_median(reps, &mut inner, &mut || {
        sink ^= load_packed()?.len();
        run_block(&mut pm.exec())
    })?;
    let fake_total = time_median(reps, &mut inner, &mut || {
        sink ^= load_f16().len();
        run_block(&mut qm.exec())
    })?;
    std::hint::black_box(sink);

    let packed = Timings {
        param_load_s: packed_load,
        compute_s: packed_compute,
        block_total_s: packed_total,
    };
    let fake_quant = Timings {
        param_load_s: fake_load,
        compute_s: fake_compute,
        block_total_s: fake_total,
    };
    Ok(LatencyReport {
        block,
        tokens,
        reps,
        inner,
        speedup: Timings {
            param_load_s: fake_load / packed_load,
            compute_s: fake_compute / packed_compute,
            block_total_s: fake_total / packed_total,
        },
        packed,
        fake_quant,
        packed_weight_bytes,
        f16_weight_bytes,
    })
}

/// Records each slot's input during a full-precision block pass.
struct Recorder<'a, T> {
    inputs: &'a mut Vec<Tensor<T>>,
}

impl<T: Scalar> LinearExec<T> for Recorder<'_, T> {
    fn apply(
        &mut self,
        tape: &mut Tape<T>,
        block: usize,
        slot: Slot,
        x: Var,
        linears: &[BoundLinear],
    ) -> Result<Vec<Var>> {
        let v = tape.value(x);
        let cols = v.last_dim();
        self.inputs
            .push(v.clone().reshape(&[v.len() / cols.max(1), cols])?);
        FullPrecision.apply(tape, block, slot, x, linears)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::generate_dataset;
    use crate::qmodel::TransformInit;

    #[test]
    fn pack_worked_example() {
        assert_eq!(pack_int4(&[3, -5], 1, 2).unwrap(), vec![0xB3]);
        assert_eq!(pack_int4(&[0; 6], 2, 3).unwrap(), vec![0; 4]);
    }

    #[test]
    fn pack_rejects_out_of_range_codes() {
        assert!(matches!(
            pack_int4(&[8], 1, 1),
            Err(Error::CodeRange { value: 8, bits: 4 })
        ));
        assert!(matches!(
            pack_int4(&[-8], 1, 1),
            Err(Error::CodeRange { .. })
        ));
    }

    #[test]
    fn every_pair_of_codes_round_trips() {
        for a in -7..=7 {
            for b in -7..=7 {
                let p = pack_int4(&[a, b, a], 1, 3).unwrap();
                assert_eq!(p.len(), 2);
                assert_eq!(
                    unpack_int4(&p, 1, 3).unwrap(),
                    vec![a as i8, b as i8, a as i8]
                );
            }
        }
    }

    #[test]
    fn unpack_rejects_unused_code_and_dirty_padding() {
        assert!(matches!(
            unpack_int4(&[0x08], 1, 2),
            Err(Error::CodeRange { .. })
        ));
        assert!(matches!(unpack_int4(&[0x10], 1, 1), Err(Error::Format(_))));
    }

    #[test]
    fn qgemm_hand_example() {
        let w = PackedMatrix::from_codes(&[7, -4], 1, 2, vec![1.0f64]).unwrap();
        let a = QuantizedActivations {
            rows: 1,
            cols: 2,
            bits: 4,
            codes: vec![7, 2],
            scales: vec![1.0f64],
        };
        assert_eq!(qgemm(&w, &a).unwrap().data(), &[41.0]);
        let w = PackedMatrix {
            scales: vec![0.5],
            ..w
        };
        let a = QuantizedActivations {
            scales: vec![0.25],
            ..a
        };
        assert_eq!(qgemm(&w, &a).unwrap().data(), &[41.0 * 0.125]);
    }

    #[test]
    fn identity_weights_return_dequantized_activations() {
        let n = 5;
        let codes: Vec<i32> = (0..n * n)
            .map(|k| if k / n == k % n { 7 } else { 0 })
            .collect();
        let w = PackedMatrix::from_codes(&codes, n, n, vec![1.0 / 7.0; n]).unwrap();
        let x = Tensor::from_fn(&[3, n], |k| (k as f64 * 0.37).sin());
        let a = QuantizedActivations::quantize(&x, 4, 1.0).unwrap();
        let y = qgemm(&w, &a).unwrap();
        for t in 0..3 {
            for c in 0..n {
                let want = a.codes[t * n + c] as f64 * a.scales[t];
                assert!((y.data()[t * n + c] - want).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn guard_bounds_the_accumulator() {
        assert!(accumulator_guard(1 << 16, 4, 4).is_ok());
        assert!(accumulator_guard(1 << 16, 4, 8).is_ok());
        assert!(matches!(
            accumulator_guard(50_000_000, 4, 4),
            Err(Error::AccumulatorGuard(_))
        ));
    }

    #[test]
    fn packed_model_matches_fake_quant_and_round_trips() {
        let cfg = ToyModelConfig {
            tokens_per_view: 4,
            hidden_dim: 8,
            mlp_dim: 16,
            aa_pairs: 1,
            ..Default::default()
        };
        let model = ToyModel::<f64>::new(cfg.clone()).unwrap();
        let data = generate_dataset(&cfg, 3, 5).unwrap();
        let qm = QuantizedModel::new(
            model.clone(),
            QuantSpec::weight(4),
            QuantSpec::activation(4),
            TransformInit::Hadamard { seed: 1 },
        )
        .unwrap();
        let pm = PackedModel::from_quantized(&qm).unwrap();
        let a = pm.predict(&data.inputs).unwrap();
        let b = qm.predict(&data.inputs).unwrap();
        for (x, y) in [
            (&a.pose, &b.pose),
            (&a.depth, &b.depth),
            (&a.points, &b.points),
        ] {
            assert!(crate::tensor::rel_error(x.data(), y.data()) <= 1e-6);
        }
        let mut buf = Vec::new();
        pm.write(&mut buf).unwrap();
        let back = PackedModel::read(model, &mut buf.as_slice()).unwrap();
        assert_eq!(back.blocks, pm.blocks);
        assert_eq!(back.packed_bytes(), pm.packed_bytes());
    }
}
