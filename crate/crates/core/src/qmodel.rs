//! A trained model viewed through per-block quantizers: RTN, fixed Hadamard,
//! or calibrated affine transforms with learned clip factors.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::io::NamedArrays;
use crate::model::{Block, BoundLinear, FullPrecision, LinearExec, Slot, TaskOutputs, ToyModel};
use crate::quant::{fake_quant, fake_quant_tensor, QuantSpec};
use crate::tensor::{Tape, Tensor, Var};
use crate::transform::{AffineTransform, TransformKind};
use crate::Scalar;

/// Quantizer state of one slot: optional transform, one activation clip and
/// per-output-channel weight clips for each linear of the slot.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotQuant<T> {
    transform: Option<AffineTransform<T>>,
    act_clip: T,
    weight_clips: Vec<Tensor<T>>,
    stamp: Stamp,
    cache: Vec<Tensor<T>>,
}

/// Mutation counter of a slot and the value its cache was built at. Only
/// freshness takes part in equality.
#[derive(Clone, Copy, Debug)]
struct Stamp {
    current: u64,
    cached: u64,
}

impl PartialEq for Stamp {
    fn eq(&self, other: &Self) -> bool {
        (self.current == self.cached) == (other.current == other.cached)
    }
}

impl<T: Scalar> SlotQuant<T> {
    fn new(
        block: &Block<T>,
        slot: Slot,
        transform: Option<AffineTransform<T>>,
        wspec: QuantSpec,
    ) -> Result<Self> {
        let weight_clips = block
            .linears(slot)
            .iter()
            .map(|l| Tensor::ones(&[l.out_dim()]))
            .collect();
        let mut s = Self {
            transform,
            act_clip: T::one(),
            weight_clips,
            stamp: Stamp {
                current: 0,
                cached: u64::MAX,
            },
            cache: Vec::new(),
        };
        s.refresh(block, slot, wspec)?;
        Ok(s)
    }

    pub fn transform(&self) -> Option<&AffineTransform<T>> {
        self.transform.as_ref()
    }

    pub fn act_clip(&self) -> T {
        self.act_clip
    }

    pub fn weight_clips(&self) -> &[Tensor<T>] {
        &self.weight_clips
    }

    /// Replaces all calibration parameters of the slot. The cached weights
    /// are stale until [`SlotQuant::refresh`].
    pub fn set_params(
        &mut self,
        p: Option<(Tensor<T>, Tensor<T>)>,
        act_clip: T,
        weight_clips: Vec<Tensor<T>>,
    ) -> Result<()> {
        if weight_clips.len() != self.weight_clips.len()
            || weight_clips
                .iter()
                .zip(&self.weight_clips)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(shape_err("slot quant", "weight clip shapes changed"));
        }
        match (p, &mut self.transform) {
            (Some((p, s)), Some(t)) => t.set(p, s)?,
            (None, _) => {}
            (Some(_), None) => return Err(Error::InvalidArgument("slot has no transform".into())),
        }
        self.act_clip = act_clip;
        self.weight_clips = weight_clips;
        self.stamp.current += 1;
        Ok(())
    }

    pub fn is_stale(&self) -> bool {
        self.stamp.cached != self.stamp.current
    }

    /// Refolds and requantizes the slot's weights.
    pub fn refresh(&mut self, block: &Block<T>, slot: Slot, wspec: QuantSpec) -> Result<()> {
        self.cache = block
            .linears(slot)
            .iter()
            .zip(&self.weight_clips)
            .map(|(l, clip)| {
                let w = match &self.transform {
                    Some(t) => t.fold(&l.weight)?,
                    None => l.weight.clone(),
                };
                fake_quant_tensor(&w, wspec, clip.data())
            })
            .collect::<Result<_>>()?;
        self.stamp.cached = self.stamp.current;
        Ok(())
    }

    /// Quantized (folded) weights, one per linear of the slot.
    pub fn quantized_weights(&self) -> Result<&[Tensor<T>]> {
        if self.is_stale() {
            return Err(Error::StaleFold {
                transform: self.stamp.current,
                cache: self.stamp.cached,
            });
        }
        Ok(&self.cache)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockQuant<T> {
    pub slots: Vec<SlotQuant<T>>,
}

impl<T: Scalar> BlockQuant<T> {
    pub fn slot(&self, slot: Slot) -> &SlotQuant<T> {
        &self.slots[slot.index()]
    }

    pub fn slot_mut(&mut self, slot: Slot) -> &mut SlotQuant<T> {
        &mut self.slots[slot.index()]
    }
}

/// How each quantized slot is transformed before quantization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformInit {
    None,
    Identity,
    Hadamard { seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedModel<T> {
    pub model: ToyModel<T>,
    pub wspec: QuantSpec,
    pub aspec: QuantSpec,
    /// `None` keeps a block in full precision.
    pub blocks: Vec<Option<BlockQuant<T>>>,
    special_mask: Arc<[bool]>,
}

fn make_transform<T: Scalar>(
    init: TransformInit,
    dim: usize,
    block: usize,
    slot: Slot,
) -> Result<Option<AffineTransform<T>>> {
    Ok(match init {
        TransformInit::None => None,
        TransformInit::Identity => Some(AffineTransform::identity(dim)),
        TransformInit::Hadamard { seed } => {
            let s = seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add((block * Slot::ALL.len() + slot.index()) as u64);
            Some(AffineTransform::hadamard(dim, s)?)
        }
    })
}

impl<T: Scalar> QuantizedModel<T> {
    /// Quantizes every block with the given transform initialization and
    /// unit clip factors.
    pub fn new(
        model: ToyModel<T>,
        wspec: QuantSpec,
        aspec: QuantSpec,
        init: TransformInit,
    ) -> Result<Self> {
        let blocks = (0..model.num_blocks())
            .map(|b| Self::block_quant(&model, b, wspec, init).map(Some))
            .collect::<Result<_>>()?;
        let special_mask = model.config.special_token_mask();
        Ok(Self {
            model,
            wspec,
            aspec,
            blocks,
            special_mask,
        })
    }

    /// Quantizes only `block`; every other block stays full precision.
    pub fn single_block(
        model: ToyModel<T>,
        block: usize,
        wspec: QuantSpec,
        aspec: QuantSpec,
        init: TransformInit,
    ) -> Result<Self> {
        if block >= model.num_blocks() {
            return Err(Error::InvalidArgument(format!(
                "block {} out of range",
                block
            )));
        }
        let mut blocks: Vec<Option<BlockQuant<T>>> = vec![None; model.num_blocks()];
        blocks[block] = Some(Self::block_quant(&model, block, wspec, init)?);
        let special_mask = model.config.special_token_mask();
        Ok(Self {
            model,
            wspec,
            aspec,
            blocks,
            special_mask,
        })
    }

    fn block_quant(
        model: &ToyModel<T>,
        b: usize,
        wspec: QuantSpec,
        init: TransformInit,
    ) -> Result<BlockQuant<T>> {
        let blk = &model.blocks[b];
        let slots = Slot::ALL
            .iter()
            .map(|&s| {
                let t = make_transform(init, s.input_dim(&model.config), b, s)?;
                SlotQuant::new(blk, s, t, wspec)
            })
            .collect::<Result<_>>()?;
        Ok(BlockQuant { slots })
    }

    pub fn special_mask(&self) -> Arc<[bool]> {
        self.special_mask.clone()
    }

    /// Rebuilds every stale weight cache.
    pub fn refresh(&mut self) -> Result<()> {
        for (b, bq) in self.blocks.iter_mut().enumerate() {
            if let Some(bq) = bq {
                for &s in &Slot::ALL {
                    let sq = bq.slot_mut(s);
                    if sq.is_stale() {
                        sq.refresh(&self.model.blocks[b], s, self.wspec)?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn exec(&self) -> QuantizedExec<'_, T> {
        QuantizedExec { qm: self }
    }

    pub fn predict(&self, inputs: &Tensor<T>) -> Result<TaskOutputs<T>> {
        self.model.predict_with(inputs, &mut self.exec())
    }

    /// Calibration parameters and specs as named arrays (the base model is
    /// stored separately).
    pub fn to_arrays(&self) -> NamedArrays {
        let mut out = NamedArrays {
            meta: serde_json::json!({
                "kind": "quant_state",
                "wspec": self.wspec,
                "aspec": self.aspec,
                "blocks": self.blocks.iter().map(|b| b.as_ref().map(|bq| {
                    bq.slots.iter().map(|s| s.transform.as_ref().map(|t| t.kind())).collect::<Vec<_>>()
                })).collect::<Vec<_>>(),
            }),
            arrays: Vec::new(),
        };
        for (b, bq) in self.blocks.iter().enumerate() {
            let Some(bq) = bq else { continue };
            for &s in &Slot::ALL {
                let sq = bq.slot(s);
                let p = format!("blocks.{}.{}", b, s.name());
                if let Some(t) = &sq.transform {
                    out.push(
                        format!("{p}.transform.p"),
                        t.p().shape(),
                        t.p().to_f64_vec(),
                    );
                    out.push(
                        format!("{p}.transform.diag_scale"),
                        t.diag_scale().shape(),
                        t.diag_scale().to_f64_vec(),
                    );
                }
                out.push(format!("{p}.act_clip"), &[], vec![sq.act_clip.as_f64()]);
                for (i, c) in sq.weight_clips.iter().enumerate() {
                    out.push(format!("{p}.weight_clip.{i}"), c.shape(), c.to_f64_vec());
                }
            }
        }
        out
    }

    pub fn from_arrays(model: ToyModel<T>, arrays: &NamedArrays) -> Result<Self> {
        let meta = &arrays.meta;
        let field = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("quant state lacks `{}`", k)))
        };
        let wspec: QuantSpec = serde_json::from_value(field("wspec")?)?;
        let aspec: QuantSpec = serde_json::from_value(field("aspec")?)?;
        let kinds: Vec<Option<Vec<Option<TransformKind>>>> =
            serde_json::from_value(field("blocks")?)?;
        if kinds.len() != model.num_blocks() {
            return Err(Error::Format(format!(
                "{} blocks for a {}-block model",
                kinds.len(),
                model.num_blocks()
            )));
        }
        let tensor = |name: &str| -> Result<Tensor<T>> {
            let (shape, data) = arrays.get(name)?;
            Tensor::new(shape, data.iter().map(|&v| T::lit(v)).collect())
        };
        let mut blocks = Vec::with_capacity(kinds.len());
        for (b, kb) in kinds.iter().enumerate() {
            let Some(kb) = kb else {
                blocks.push(None);
                continue;
            };
            let blk = &model.blocks[b];
            let mut slots = Vec::with_capacity(Slot::ALL.len());
            for (&s, kind) in Slot::ALL.iter().zip(kb) {
                let p = format!("blocks.{}.{}", b, s.name());
                let transform = match kind {
                    Some(k) => Some(AffineTransform::from_parts(
                        tensor(&format!("{p}.transform.p"))?,
                        tensor(&format!("{p}.transform.diag_scale"))?,
                        *k,
                    )?),
                    None => None,
                };
                let mut sq = SlotQuant::new(blk, s, transform, wspec)?;
                for (i, c) in sq.weight_clips.iter_mut().enumerate() {
                    let t = tensor(&format!("{p}.weight_clip.{i}"))?;
                    if t.shape() != c.shape() {
                        return Err(Error::Format(format!(
                            "{p}.weight_clip.{i} has shape {:?}",
                            t.shape()
                        )));
                    }
                    *c = t;
                }
                sq.act_clip = tensor(&format!("{p}.act_clip"))?.data()[0];
                sq.refresh(blk, s, wspec)?;
                slots.push(sq);
            }
            blocks.push(Some(BlockQuant { slots }));
        }
        let special_mask = model.config.special_token_mask();
        Ok(Self {
            model,
            wspec,
            aspec,
            blocks,
            special_mask,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_arrays().save(path)
    }

    pub fn load(model: ToyModel<T>, path: &Path) -> Result<Self> {
        Self::from_arrays(model, &NamedArrays::load(path)?)
    }
}

/// Round-to-nearest view: no transforms, unit clips.
pub fn rtn_quantize_model<T: Scalar>(
    model: &ToyModel<T>,
    wspec: QuantSpec,
    aspec: QuantSpec,
) -> Result<QuantizedModel<T>> {
    QuantizedModel::new(model.clone(), wspec, aspec, TransformInit::None)
}

/// Inference executor over cached quantized weights.
pub struct QuantizedExec<'a, T> {
    qm: &'a QuantizedModel<T>,
}

/// Applies a slot's transform and activation quantizer to `x`, then
/// multiplies by the given (already quantized) weights.
pub(crate) fn quantized_slot<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    peff: Option<Var>,
    act_clip: Var,
    aspec: QuantSpec,
    mask: Arc<[bool]>,
    weights: &[Var],
    linears: &[BoundLinear],
) -> Result<Vec<Var>> {
    let xt = match peff {
        Some(p) => tape.matmul(x, p)?,
        None => x,
    };
    let xq = fake_quant(tape, xt, act_clip, aspec, Some(mask))?;
    weights
        .iter()
        .zip(linears)
        .map(|(&w, l)| {
            let y = tape.matmul(xq, w)?;
            tape.add(y, l.b)
        })
        .collect()
}

impl<T: Scalar> LinearExec<T> for QuantizedExec<'_, T> {
    fn apply(
        &mut self,
        tape: &mut Tape<T>,
        block: usize,
        slot: Slot,
        x: Var,
        linears: &[BoundLinear],
    ) -> Result<Vec<Var>> {
        let Some(bq) = self.qm.blocks.get(block).and_then(|b| b.as_ref()) else {
            return FullPrecision.apply(tape, block, slot, x, linears);
        };
        let sq = bq.slot(slot);
        let weights: Vec<Var> = sq
            .quantized_weights()?
            .iter()
            .map(|w| tape.constant(w.clone()))
            .collect();
        let peff = sq.transform.as_ref().map(|t| tape.constant(t.effective()));
        let clip = tape.constant(Tensor::scalar(sq.act_clip));
        quantized_slot(
            tape,
            x,
            peff,
            clip,
            self.qm.aspec,
            self.qm.special_mask(),
            &weights,
            linears,
        )
    }
}
