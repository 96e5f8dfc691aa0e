//! Desk-scale multi-view transformer with alternating frame/global attention
//! and three task heads (pose, depth, points).

mod checkpoint;
mod data;
mod train;

pub(crate) use data::gather;
pub use data::{
    generate_dataset, DataSpec, SyntheticDataset, Targets, Teacher, DEFAULT_NOISE_STD,
    TEACHER_WIDTH,
};
pub use train::{
    dataset_losses, full_gradient_norm, task_loss_values, task_losses, train_toy, Task, TaskLosses,
    TrainConfig, TrainReport,
};

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::Scalar;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyModelConfig {
    pub num_views: usize,
    /// Patch tokens per view; each view also carries one special token.
    pub tokens_per_view: usize,
    pub in_dim: usize,
    pub hidden_dim: usize,
    /// Alternating-attention pairs; each pair is one frame and one global block.
    pub aa_pairs: usize,
    pub mlp_dim: usize,
    pub pose_dim: usize,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            num_views: 2,
            tokens_per_view: 16,
            in_dim: 8,
            hidden_dim: 32,
            aa_pairs: 3,
            mlp_dim: 64,
            pose_dim: 4,
            seed: 42,
        }
    }
}

impl ToyModelConfig {
    pub fn num_blocks(&self) -> usize {
        2 * self.aa_pairs
    }

    /// Tokens per view including the special token.
    pub fn view_tokens(&self) -> usize {
        self.tokens_per_view + 1
    }

    pub fn num_tokens(&self) -> usize {
        self.num_views * self.view_tokens()
    }

    pub fn block_kind(&self, block: usize) -> AttnKind {
        if block % 2 == 0 {
            AttnKind::Frame
        } else {
            AttnKind::Global
        }
    }

    pub fn block_name(&self, block: usize) -> String {
        match self.block_kind(block) {
            AttnKind::Frame => format!("frame_{}", block / 2),
            AttnKind::Global => format!("global_{}", block / 2),
        }
    }

    /// `true` at the special-token row of each view.
    pub fn special_token_mask(&self) -> Arc<[bool]> {
        (0..self.num_tokens())
            .map(|t| t % self.view_tokens() == 0)
            .collect::<Vec<_>>()
            .into()
    }

    pub fn validate(&self) -> Result<()> {
        let pow2 = |n: usize| n > 0 && n.is_power_of_two();
        if !pow2(self.hidden_dim) || !pow2(self.mlp_dim) {
            return Err(Error::InvalidArgument(format!(
                "hidden_dim {} and mlp_dim {} must be powers of two",
                self.hidden_dim, self.mlp_dim
            )));
        }
        if self.num_views == 0
            || self.tokens_per_view == 0
            || self.aa_pairs == 0
            || self.in_dim == 0
        {
            return Err(Error::InvalidArgument(
                "model dimensions must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnKind {
    /// Attention within each view's tokens.
    Frame,
    /// Attention over all tokens of all views.
    Global,
}

/// Quantizable linear groups of a block; linears in a group share an input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Qkv,
    Out,
    MlpIn,
    MlpOut,
}

impl Slot {
    pub const ALL: [Slot; 4] = [Slot::Qkv, Slot::Out, Slot::MlpIn, Slot::MlpOut];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn input_dim(self, cfg: &ToyModelConfig) -> usize {
        match self {
            Slot::MlpOut => cfg.mlp_dim,
            _ => cfg.hidden_dim,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Slot::Qkv => "qkv",
            Slot::Out => "out",
            Slot::MlpIn => "mlp_in",
            Slot::MlpOut => "mlp_out",
        }
    }
}

/// Weight stored `[in, out]` so that `y = x W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, gain: f64) -> Self {
        let std = gain / (fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        Self {
            weight: Tensor::from_fn(&[fan_in, fan_out], |_| T::lit(normal.sample(rng))),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> BoundLinear {
        BoundLinear {
            w: tape.leaf(self.weight.clone(), requires_grad),
            b: tape.leaf(self.bias.clone(), requires_grad),
        }
    }

    /// Zeroes every weight and bias.
    pub fn zero(&mut self) {
        self.weight
            .data_mut()
            .iter_mut()
            .for_each(|x| *x = T::zero());
        self.bias.data_mut().iter_mut().for_each(|x| *x = T::zero());
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub w: Var,
    pub b: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub kind: AttnKind,
    pub ln1_gamma: Tensor<T>,
    pub ln1_beta: Tensor<T>,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub ln2_gamma: Tensor<T>,
    pub ln2_beta: Tensor<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundBlock {
    pub kind: AttnKind,
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub q: BoundLinear,
    pub k: BoundLinear,
    pub v: BoundLinear,
    pub o: BoundLinear,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub fc1: BoundLinear,
    pub fc2: BoundLinear,
}

impl<T: Scalar> Block<T> {
    pub fn linears(&self, slot: Slot) -> Vec<&Linear<T>> {
        match slot {
            Slot::Qkv => vec![&self.q, &self.k, &self.v],
            Slot::Out => vec![&self.o],
            Slot::MlpIn => vec![&self.fc1],
            Slot::MlpOut => vec![&self.fc2],
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> BoundBlock {
        let mut leaf = |t: &Tensor<T>| tape.leaf(t.clone(), requires_grad);
        let ln1_gamma = leaf(&self.ln1_gamma);
        let ln1_beta = leaf(&self.ln1_beta);
        let ln2_gamma = leaf(&self.ln2_gamma);
        let ln2_beta = leaf(&self.ln2_beta);
        BoundBlock {
            kind: self.kind,
            ln1_gamma,
            ln1_beta,
            q: self.q.bind(tape, requires_grad),
            k: self.k.bind(tape, requires_grad),
            v: self.v.bind(tape, requires_grad),
            o: self.o.bind(tape, requires_grad),
            ln2_gamma,
            ln2_beta,
            fc1: self.fc1.bind(tape, requires_grad),
            fc2: self.fc2.bind(tape, requires_grad),
        }
    }
}

impl BoundBlock {
    pub fn linears(&self, slot: Slot) -> Vec<BoundLinear> {
        match slot {
            Slot::Qkv => vec![self.q, self.k, self.v],
            Slot::Out => vec![self.o],
            Slot::MlpIn => vec![self.fc1],
            Slot::MlpOut => vec![self.fc2],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel<T> {
    pub config: ToyModelConfig,
    pub patch_embed: Linear<T>,
    /// One learned token per view, `[num_views, hidden]`.
    pub special_tokens: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub lnf_gamma: Tensor<T>,
    pub lnf_beta: Tensor<T>,
    pub pose_head: Linear<T>,
    pub depth_head: Linear<T>,
    pub point_head: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct BoundModel {
    pub patch_embed: BoundLinear,
    pub special_tokens: Var,
    pub blocks: Vec<BoundBlock>,
    pub lnf_gamma: Var,
    pub lnf_beta: Var,
    pub pose_head: BoundLinear,
    pub depth_head: BoundLinear,
    pub point_head: BoundLinear,
}

/// Task predictions on a tape.
#[derive(Clone, Copy, Debug)]
pub struct TaskVars {
    /// `[batch, pose_dim]`
    pub pose: Var,
    /// `[batch, views, tokens]`
    pub depth: Var,
    /// `[batch, views, tokens, 3]`
    pub points: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskOutputs<T> {
    pub pose: Tensor<T>,
    pub depth: Tensor<T>,
    pub points: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub outputs: TaskVars,
    /// Input tokens of block 0, `[batch, tokens, hidden]`.
    pub embedded: Var,
    /// Output of every block, `[batch, tokens, hidden]`.
    pub hooks: Vec<Var>,
}

/// Executes the linears of one slot. Implementations decide whether and how
/// the computation is transformed and quantized.
pub trait LinearExec<T: Scalar> {
    fn apply(
        &mut self,
        tape: &mut Tape<T>,
        block: usize,
        slot: Slot,
        x: Var,
        linears: &[BoundLinear],
    ) -> Result<Vec<Var>>;
}

/// Plain full-precision linears.
#[derive(Clone, Copy, Debug, Default)]
pub struct FullPrecision;

pub fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, lin: BoundLinear) -> Result<Var> {
    let y = tape.matmul(x, lin.w)?;
    tape.add(y, lin.b)
}

impl<T: Scalar> LinearExec<T> for FullPrecision {
    fn apply(
        &mut self,
        tape: &mut Tape<T>,
        _block: usize,
        _slot: Slot,
        x: Var,
        linears: &[BoundLinear],
    ) -> Result<Vec<Var>> {
        linears.iter().map(|&l| linear(tape, x, l)).collect()
    }
}

fn affine_norm<T: Scalar>(tape: &mut Tape<T>, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let n = tape.layernorm(x, T::lit(LN_EPS))?;
    let n = tape.mul(n, gamma)?;
    tape.add(n, beta)
}

/// One pre-norm transformer block on `[batch, tokens, hidden]` tokens.
pub fn block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ToyModelConfig,
    index: usize,
    blk: &BoundBlock,
    x: Var,
    exec: &mut dyn LinearExec<T>,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 || shape[1] != cfg.num_tokens() || shape[2] != cfg.hidden_dim {
        return Err(shape_err(
            "block_forward",
            format!(
                "expected [batch, {}, {}], got {:?}",
                cfg.num_tokens(),
                cfg.hidden_dim,
                shape
            ),
        ));
    }
    let batch = shape[0];
    let c = cfg.hidden_dim;
    let a = affine_norm(tape, x, blk.ln1_gamma, blk.ln1_beta)?;
    let qkv = exec.apply(tape, index, Slot::Qkv, a, &blk.linears(Slot::Qkv))?;
    let (groups, len) = match blk.kind {
        AttnKind::Frame => (batch * cfg.num_views, cfg.view_tokens()),
        AttnKind::Global => (batch, cfg.num_tokens()),
    };
    let q = tape.reshape(qkv[0], &[groups, len, c])?;
    let k = tape.reshape(qkv[1], &[groups, len, c])?;
    let v = tape.reshape(qkv[2], &[groups, len, c])?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, T::lit(1.0 / (c as f64).sqrt()))?;
    let attn = tape.softmax(scores)?;
    let ctx = tape.matmul(attn, v)?;
    let ctx = tape.reshape(ctx, &[batch, cfg.num_tokens(), c])?;
    let o = exec.apply(tape, index, Slot::Out, ctx, &blk.linears(Slot::Out))?[0];
    let h = tape.add(x, o)?;
    let a2 = affine_norm(tape, h, blk.ln2_gamma, blk.ln2_beta)?;
    let m = exec.apply(tape, index, Slot::MlpIn, a2, &blk.linears(Slot::MlpIn))?[0];
    let m = tape.gelu(m)?;
    let m = exec.apply(tape, index, Slot::MlpOut, m, &blk.linears(Slot::MlpOut))?[0];
    tape.add(h, m)
}

impl<T: Scalar> ToyModel<T> {
    /// Random initialization from `config.seed`.
    pub fn new(config: ToyModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let c = config.hidden_dim;
        let m = config.mlp_dim;
        let residual_gain = 1.0 / (config.num_blocks() as f64).sqrt();
        let patch_embed = Linear::init(&mut rng, config.in_dim, c, 1.0);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let special_tokens =
            Tensor::from_fn(&[config.num_views, c], |_| T::lit(normal.sample(&mut rng)));
        let blocks = (0..config.num_blocks())
            .map(|i| Block {
                kind: config.block_kind(i),
                ln1_gamma: Tensor::ones(&[c]),
                ln1_beta: Tensor::zeros(&[c]),
                q: Linear::init(&mut rng, c, c, 1.0),
                k: Linear::init(&mut rng, c, c, 1.0),
                v: Linear::init(&mut rng, c, c, 1.0),
                o: Linear::init(&mut rng, c, c, residual_gain),
                ln2_gamma: Tensor::ones(&[c]),
                ln2_beta: Tensor::zeros(&[c]),
                fc1: Linear::init(&mut rng, c, m, 1.0),
                fc2: Linear::init(&mut rng, m, c, residual_gain),
            })
            .collect();
        Ok(Self {
            patch_embed,
            special_tokens,
            blocks,
            lnf_gamma: Tensor::ones(&[c]),
            lnf_beta: Tensor::zeros(&[c]),
            pose_head: Linear::init(&mut rng, c, config.pose_dim, 1.0),
            depth_head: Linear::init(&mut rng, c, 1, 1.0),
            point_head: Linear::init(&mut rng, c, 3, 1.0),
            config,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> BoundModel {
        BoundModel {
            patch_embed: self.patch_embed.bind(tape, requires_grad),
            special_tokens: tape.leaf(self.special_tokens.clone(), requires_grad),
            blocks: self
                .blocks
                .iter()
                .map(|b| b.bind(tape, requires_grad))
                .collect(),
            lnf_gamma: tape.leaf(self.lnf_gamma.clone(), requires_grad),
            lnf_beta: tape.leaf(self.lnf_beta.clone(), requires_grad),
            pose_head: self.pose_head.bind(tape, requires_grad),
            depth_head: self.depth_head.bind(tape, requires_grad),
            point_head: self.point_head.bind(tape, requires_grad),
        }
    }

    /// Patch embedding plus special tokens: `[batch, views, tokens, in]` to
    /// `[batch, views*(tokens+1), hidden]`, special token first in each view.
    pub fn embed(&self, tape: &mut Tape<T>, bm: &BoundModel, input: Var) -> Result<Var> {
        let cfg = &self.config;
        let s = tape.shape(input).to_vec();
        if s.len() != 4
            || s[1] != cfg.num_views
            || s[2] != cfg.tokens_per_view
            || s[3] != cfg.in_dim
        {
            return Err(shape_err(
                "forward",
                format!(
                    "expected [batch, {}, {}, {}], got {:?}",
                    cfg.num_views, cfg.tokens_per_view, cfg.in_dim, s
                ),
            ));
        }
        let batch = s[0];
        let c = cfg.hidden_dim;
        let patches = linear(tape, input, bm.patch_embed)?;
        let zeros = tape.constant(Tensor::zeros(&[batch, cfg.num_views, 1, c]));
        let special = tape.reshape(bm.special_tokens, &[cfg.num_views, 1, c])?;
        let special = tape.add(zeros, special)?;
        let tokens = tape.concat(&[special, patches], 2)?;
        tape.reshape(tokens, &[batch, cfg.num_tokens(), c])
    }

    /// Final norm and the three heads on `[batch, tokens, hidden]` states.
    pub fn heads(&self, tape: &mut Tape<T>, bm: &BoundModel, h: Var) -> Result<TaskVars> {
        let cfg = &self.config;
        let batch = tape.shape(h)[0];
        let c = cfg.hidden_dim;
        let h = affine_norm(tape, h, bm.lnf_gamma, bm.lnf_beta)?;
        let h = tape.reshape(h, &[batch, cfg.num_views, cfg.view_tokens(), c])?;
        let special = tape.slice(h, 2, 0, 1)?;
        let special = tape.reshape(special, &[batch, cfg.num_views, c])?;
        let pooled = tape.sum_axis(special, 1)?;
        let pooled = tape.scale(pooled, T::lit(1.0 / cfg.num_views as f64))?;
        let pose = linear(tape, pooled, bm.pose_head)?;
        let patches = tape.slice(h, 2, 1, cfg.tokens_per_view)?;
        let depth = linear(tape, patches, bm.depth_head)?;
        let depth = tape.reshape(depth, &[batch, cfg.num_views, cfg.tokens_per_view])?;
        let points = linear(tape, patches, bm.point_head)?;
        Ok(TaskVars {
            pose,
            depth,
            points,
        })
    }

    /// Full forward pass. When `retain_hooks` is set the block outputs keep
    /// their gradients after `backward`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bm: &BoundModel,
        input: Var,
        exec: &mut dyn LinearExec<T>,
        retain_hooks: bool,
    ) -> Result<ForwardTrace> {
        let embedded = self.embed(tape, bm, input)?;
        let mut h = embedded;
        let mut hooks = Vec::with_capacity(self.blocks.len());
        for (i, blk) in bm.blocks.iter().enumerate() {
            h = block_forward(tape, &self.config, i, blk, h, exec)?;
            if retain_hooks {
                tape.retain_grad(h);
            }
            hooks.push(h);
        }
        let outputs = self.heads(tape, bm, h)?;
        Ok(ForwardTrace {
            outputs,
            embedded,
            hooks,
        })
    }

    /// Gradient-free full-precision prediction.
    pub fn predict(&self, inputs: &Tensor<T>) -> Result<TaskOutputs<T>> {
        self.predict_with(inputs, &mut FullPrecision)
    }

    pub fn predict_with(
        &self,
        inputs: &Tensor<T>,
        exec: &mut dyn LinearExec<T>,
    ) -> Result<TaskOutputs<T>> {
        let mut tape = Tape::new();
        let bm = self.bind(&mut tape, false);
        let x = tape.constant(inputs.clone());
        let tr = self.forward(&mut tape, &bm, x, exec, false)?;
        Ok(TaskOutputs {
            pose: tape.value(tr.outputs.pose).clone(),
            depth: tape.value(tr.outputs.depth).clone(),
            points: tape.value(tr.outputs.points).clone(),
        })
    }

    /// Named parameter list in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("patch_embed.weight".into(), &self.patch_embed.weight),
            ("patch_embed.bias".into(), &self.patch_embed.bias),
            ("special_tokens".into(), &self.special_tokens),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{}", i);
            out.push((format!("{p}.ln1.gamma"), &b.ln1_gamma));
            out.push((format!("{p}.ln1.beta"), &b.ln1_beta));
            for (n, l) in [("q", &b.q), ("k", &b.k), ("v", &b.v), ("o", &b.o)] {
                out.push((format!("{p}.{n}.weight"), &l.weight));
                out.push((format!("{p}.{n}.bias"), &l.bias));
            }
            out.push((format!("{p}.ln2.gamma"), &b.ln2_gamma));
            out.push((format!("{p}.ln2.beta"), &b.ln2_beta));
            for (n, l) in [("fc1", &b.fc1), ("fc2", &b.fc2)] {
                out.push((format!("{p}.{n}.weight"), &l.weight));
                out.push((format!("{p}.{n}.bias"), &l.bias));
            }
        }
        out.push(("lnf.gamma".into(), &self.lnf_gamma));
        out.push(("lnf.beta".into(), &self.lnf_beta));
        for (n, l) in [
            ("pose_head", &self.pose_head),
            ("depth_head", &self.depth_head),
            ("point_head", &self.point_head),
        ] {
            out.push((format!("{n}.weight"), &l.weight));
            out.push((format!("{n}.bias"), &l.bias));
        }
        out
    }

    /// Mutable parameters in the same order as [`ToyModel::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = vec![
            &mut self.patch_embed.weight,
            &mut self.patch_embed.bias,
            &mut self.special_tokens,
        ];
        for b in &mut self.blocks {
            out.push(&mut b.ln1_gamma);
            out.push(&mut b.ln1_beta);
            for l in [&mut b.q, &mut b.k, &mut b.v, &mut b.o] {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
            out.push(&mut b.ln2_gamma);
            out.push(&mut b.ln2_beta);
            for l in [&mut b.fc1, &mut b.fc2] {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        out.push(&mut self.lnf_gamma);
        out.push(&mut self.lnf_beta);
        for l in [
            &mut self.pose_head,
            &mut self.depth_head,
            &mut self.point_head,
        ] {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    /// Bound variables in the same order as [`ToyModel::named_params`].
    pub fn bound_vars(bm: &BoundModel) -> Vec<Var> {
        let mut out = vec![bm.patch_embed.w, bm.patch_embed.b, bm.special_tokens];
        for b in &bm.blocks {
            out.push(b.ln1_gamma);
            out.push(b.ln1_beta);
            for l in [b.q, b.k, b.v, b.o] {
                out.push(l.w);
                out.push(l.b);
            }
            out.push(b.ln2_gamma);
            out.push(b.ln2_beta);
            for l in [b.fc1, b.fc2] {
                out.push(l.w);
                out.push(l.b);
            }
        }
        out.push(bm.lnf_gamma);
        out.push(bm.lnf_beta);
        for l in [bm.pose_head, bm.depth_head, bm.point_head] {
            out.push(l.w);
            out.push(l.b);
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> ToyModel<U> {
        let lin = |l: &Linear<T>| Linear {
            weight: l.weight.cast(),
            bias: l.bias.cast(),
        };
        ToyModel {
            config: self.config.clone(),
            patch_embed: lin(&self.patch_embed),
            special_tokens: self.special_tokens.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    kind: b.kind,
                    ln1_gamma: b.ln1_gamma.cast(),
                    ln1_beta: b.ln1_beta.cast(),
                    q: lin(&b.q),
                    k: lin(&b.k),
                    v: lin(&b.v),
                    o: lin(&b.o),
                    ln2_gamma: b.ln2_gamma.cast(),
                    ln2_beta: b.ln2_beta.cast(),
                    fc1: lin(&b.fc1),
                    fc2: lin(&b.fc2),
                })
                .collect(),
            lnf_gamma: self.lnf_gamma.cast(),
            lnf_beta: self.lnf_beta.cast(),
            pose_head: lin(&self.pose_head),
            depth_head: lin(&self.depth_head),
            point_head: lin(&self.point_head),
        }
    }
}

#[cfg(test)]
mod tests;
