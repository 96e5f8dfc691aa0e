//! Shared helpers for the integration tests and the acceptance binary.
#![allow(dead_code)]

use std::sync::Arc;

use fgq::model::ToyModelConfig;
use fgq::quant::{fake_quant, Granularity, QuantSpec};
use fgq::tensor::{finite_difference_grad, rel_error, QuantFreeze, Tape, Tensor, Var};
use fgq::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_EPS: f64 = 1e-6;
pub const FD_TOL: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// Small model that keeps integration tests fast.
pub fn small_config(seed: u64) -> ToyModelConfig {
    ToyModelConfig {
        num_views: 2,
        tokens_per_view: 4,
        in_dim: 4,
        hidden_dim: 8,
        aa_pairs: 2,
        mlp_dim: 16,
        pose_dim: 2,
        seed,
    }
}

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// One primitive under test: its inputs and a graph from leaves to an output
/// of any shape.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    build: Build,
}

impl OpCase {
    fn new(
        name: &'static str,
        inputs: Vec<Tensor<f64>>,
        build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Self {
            name,
            inputs,
            build: Box::new(build),
        }
    }
}

/// `sum(out * r)` for a fixed random `r`, so every output entry contributes.
fn readout(tape: &mut Tape<f64>, out: Var, r: &Tensor<f64>) -> Result<Var> {
    let rv = tape.constant(r.clone());
    let p = tape.mul(out, rv)?;
    tape.sum(p)
}

/// Worst relative error between the tape gradient and central differences
/// over all inputs of `case`. Fake-quant rounding is recorded at the
/// unperturbed point and replayed, so differences see the straight-through
/// surrogate.
pub fn check_case(case: &OpCase, seed: u64) -> Result<f64> {
    if case.name == "round_ste" {
        return check_round_ste(&case.inputs[0], seed);
    }
    let mut tape = Tape::new();
    tape.set_freeze(QuantFreeze::Record(Vec::new()));
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = (case.build)(&mut tape, &vars)?;
    let r = randn(&mut rng(seed ^ 0xfeed), tape.shape(out));
    let loss = readout(&mut tape, out, &r)?;
    let log = match tape.take_freeze() {
        QuantFreeze::Record(l) => l,
        _ => unreachable!(),
    };
    tape.backward(loss)?;
    let mut worst = 0.0f64;
    for (i, &v) in vars.iter().enumerate() {
        let analytic = tape.grad_tensor(v);
        let numeric = finite_difference_grad(
            |x| {
                let mut t = Tape::new();
                t.set_freeze(QuantFreeze::Replay(log.clone(), 0));
                let vs: Vec<Var> = case
                    .inputs
                    .iter()
                    .enumerate()
                    .map(|(j, inp)| t.constant(if j == i { x.clone() } else { inp.clone() }))
                    .collect();
                let o = (case.build)(&mut t, &vs)?;
                let l = readout(&mut t, o, &r)?;
                Ok(t.item(l))
            },
            &case.inputs[i],
            FD_EPS,
        )?;
        worst = worst.max(rel_error(analytic.data(), numeric.data()));
    }
    Ok(worst)
}

/// `round_ste` has no freeze log; its surrogate `x + (round(x0) - x0)` is
/// written out here. The graph is `sum(r * round_ste(x)^2)`.
fn check_round_ste(x0: &Tensor<f64>, seed: u64) -> Result<f64> {
    let r = randn(&mut rng(seed ^ 0xfeed), x0.shape());
    let mut tape = Tape::new();
    let x = tape.param(x0.clone());
    let q = tape.round_ste(x)?;
    let sq = tape.square(q)?;
    let loss = readout(&mut tape, sq, &r)?;
    tape.backward(loss)?;
    let residual: Vec<f64> = x0.data().iter().map(|v| v.round() - v).collect();
    let numeric = finite_difference_grad(
        |x| {
            Ok(x.data()
                .iter()
                .zip(&residual)
                .zip(r.data())
                .map(|((v, e), w)| w * (v + e).powi(2))
                .sum())
        },
        x0,
        FD_EPS,
    )?;
    Ok(rel_error(tape.grad_tensor(x).data(), numeric.data()))
}

/// Values whose magnitude stays at least `margin` from `edge`.
fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], edge: f64, margin: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = rng.sample(StandardNormal);
        if (v.abs() - edge).abs() > margin {
            break v;
        }
    })
}

/// The primitive op suite, one random instance per call.
pub fn op_suite(seed: u64) -> Vec<OpCase> {
    let mut g = rng(seed);
    let r = &mut g;
    let m = 2 + (seed % 3) as usize;
    let k = 3 + (seed % 2) as usize;
    let n = 2 + (seed % 4) as usize;
    let mut p = randn(r, &[k, k]).map(|v| 0.3 * v);
    for i in 0..k {
        p.data_mut()[i * k + i] += 1.0;
    }
    let sqrt_in = randn(r, &[m, n]).map(|v| v.abs() + 0.5);
    let clamp_in = away_from(r, &[m, n], 0.7, 1e-3);
    let aspec = QuantSpec::activation(4);
    let wspec = QuantSpec::weight(4);
    let tspec = QuantSpec::new(4, Granularity::PerTensor).expect("4-bit");
    let exempt: Arc<[bool]> = vec![true, false, false].into();
    vec![
        OpCase::new(
            "matmul",
            vec![randn(r, &[m, k]), randn(r, &[k, n])],
            |t, v| t.matmul(v[0], v[1]),
        ),
        OpCase::new(
            "matmul_batched",
            vec![randn(r, &[2, m, k]), randn(r, &[2, k, n])],
            |t, v| t.matmul(v[0], v[1]),
        ),
        OpCase::new(
            "add_broadcast",
            vec![randn(r, &[m, n]), randn(r, &[n])],
            |t, v| t.add(v[0], v[1]),
        ),
        OpCase::new("sub", vec![randn(r, &[m, n]), randn(r, &[m, n])], |t, v| {
            t.sub(v[0], v[1])
        }),
        OpCase::new("mul", vec![randn(r, &[m, n]), randn(r, &[m, n])], |t, v| {
            t.mul(v[0], v[1])
        }),
        OpCase::new("scale", vec![randn(r, &[m, n])], |t, v| t.scale(v[0], -1.7)),
        OpCase::new("transpose", vec![randn(r, &[m, n])], |t, v| {
            t.transpose(v[0])
        }),
        OpCase::new("reshape", vec![randn(r, &[m, n])], move |t, v| {
            t.reshape(v[0], &[n, m])
        }),
        OpCase::new(
            "concat",
            vec![randn(r, &[m, n]), randn(r, &[m, 2])],
            |t, v| t.concat(&[v[0], v[1]], 1),
        ),
        OpCase::new("slice", vec![randn(r, &[m, n + 2])], move |t, v| {
            t.slice(v[0], 1, 1, n)
        }),
        OpCase::new("sum", vec![randn(r, &[m, n])], |t, v| t.sum(v[0])),
        OpCase::new("mean", vec![randn(r, &[m, n])], |t, v| t.mean(v[0])),
        OpCase::new("sum_axis", vec![randn(r, &[m, n])], |t, v| {
            t.sum_axis(v[0], 0)
        }),
        OpCase::new("square", vec![randn(r, &[m, n])], |t, v| t.square(v[0])),
        OpCase::new("sqrt", vec![sqrt_in], |t, v| t.sqrt(v[0])),
        OpCase::new("exp", vec![randn(r, &[m, n])], |t, v| t.exp(v[0])),
        OpCase::new("softmax", vec![randn(r, &[m, n])], |t, v| t.softmax(v[0])),
        OpCase::new("layernorm", vec![randn(r, &[m, n + 2])], |t, v| {
            t.layernorm(v[0], 1e-5)
        }),
        OpCase::new("gelu", vec![randn(r, &[m, n])], |t, v| t.gelu(v[0])),
        OpCase::new(
            "round_ste",
            vec![randn(r, &[m, n]).map(|v| 3.0 * v)],
            |t, v| t.round_ste(v[0]),
        ),
        OpCase::new("clamp", vec![clamp_in], |t, v| t.clamp(v[0], -0.7, 0.7)),
        OpCase::new("solve", vec![p, randn(r, &[k, n])], |t, v| {
            t.solve(v[0], v[1], 1e6)
        }),
        OpCase::new(
            "fake_quant_per_token",
            vec![randn(r, &[3, n + 3]), Tensor::scalar(0.8)],
            move |t, v| fake_quant(t, v[0], v[1], aspec, Some(exempt.clone())),
        ),
        OpCase::new(
            "fake_quant_per_channel",
            vec![randn(r, &[k, n]), Tensor::full(&[n], 0.8)],
            move |t, v| fake_quant(t, v[0], v[1], wspec, None),
        ),
        OpCase::new(
            "fake_quant_per_tensor",
            vec![randn(r, &[m, n]), Tensor::scalar(0.8)],
            move |t, v| fake_quant(t, v[0], v[1], tspec, None),
        ),
    ]
}

/// Per-sample loop oracle of the diagonal Fisher: one tape per sample, the
/// objective written out directly, `sum_t g^2` accumulated per channel.
/// Returns `[task][block][channel]` row-major.
pub fn loop_fisher(
    model: &fgq::model::ToyModel<f64>,
    data: &fgq::model::SyntheticDataset<f64>,
    mode: fgq::fisher::ObjectiveMode,
) -> Result<Vec<f64>> {
    use fgq::fisher::ObjectiveMode;
    use fgq::model::FullPrecision;
    let (nl, c) = (model.num_blocks(), model.config.hidden_dim);
    let n = data.len();
    let mut f = vec![0.0; 3 * nl * c];
    for s in 0..n {
        let (x, y) = data.batch(&[s])?;
        for k in 0..3 {
            let mut tape = Tape::new();
            let bm = model.bind(&mut tape, false);
            let xin = tape.constant(x.clone());
            let tr = model.forward(&mut tape, &bm, xin, &mut FullPrecision, true)?;
            let (out, target) = match k {
                0 => (tr.outputs.pose, &y.pose),
                1 => (tr.outputs.depth, &y.depth),
                _ => (tr.outputs.points, &y.points),
            };
            let obj = match mode {
                ObjectiveMode::OutputSum => tape.sum(out)?,
                ObjectiveMode::TaskLoss => {
                    let t = tape.constant(target.clone());
                    let d = tape.sub(out, t)?;
                    let d2 = tape.square(d)?;
                    tape.mean(d2)?
                }
            };
            tape.backward(obj)?;
            for (l, &h) in tr.hooks.iter().enumerate() {
                let g = tape.grad_tensor(h);
                for tok in g.data().chunks_exact(c) {
                    for (ch, v) in tok.iter().enumerate() {
                        f[(k * nl + l) * c + ch] += v * v;
                    }
                }
            }
        }
    }
    f.iter_mut().for_each(|v| *v /= n as f64);
    Ok(f)
}

/// Output of every block for `inputs` under `exec`.
pub fn block_outputs(
    model: &fgq::model::ToyModel<f64>,
    inputs: &Tensor<f64>,
    exec: &mut dyn fgq::model::LinearExec<f64>,
) -> Result<Vec<Tensor<f64>>> {
    let mut tape = Tape::new();
    let bm = model.bind(&mut tape, false);
    let x = tape.constant(inputs.clone());
    let tr = model.forward(&mut tape, &bm, x, exec, false)?;
    Ok(tr.hooks.iter().map(|&h| tape.value(h).clone()).collect())
}

/// Worst relative gap between plain full-precision block outputs (and task
/// outputs) and the W16A16 path through transforms folded into the weights,
/// for identity, random orthogonal and Hadamard transforms.
pub fn fold_gaps(
    model: &fgq::model::ToyModel<f64>,
    inputs: &Tensor<f64>,
    seed: u64,
) -> Result<Vec<(&'static str, f64)>> {
    use fgq::model::{FullPrecision, Slot};
    use fgq::qmodel::{QuantizedModel, TransformInit};
    use fgq::transform::random_orthogonal;
    let pass = QuantSpec::new(16, Granularity::PerOutputChannel)?;
    let pass_a = QuantSpec::new(16, Granularity::PerToken)?;
    let reference = block_outputs(model, inputs, &mut FullPrecision)?;
    let ref_pred = model.predict(inputs)?;

    let identity = QuantizedModel::new(model.clone(), pass, pass_a, TransformInit::Identity)?;
    let hadamard = QuantizedModel::new(
        model.clone(),
        pass,
        pass_a,
        TransformInit::Hadamard { seed },
    )?;
    let mut orthogonal = identity.clone();
    for (b, bq) in orthogonal.blocks.iter_mut().enumerate() {
        let bq = bq.as_mut().expect("all blocks quantized");
        for &s in &Slot::ALL {
            let sq = bq.slot_mut(s);
            let n = s.input_dim(&model.config);
            let p = random_orthogonal(n, seed ^ (b * 16 + s.index()) as u64);
            let clips = sq.weight_clips().to_vec();
            sq.set_params(Some((p, Tensor::ones(&[n]))), 1.0, clips)?;
        }
    }
    orthogonal.refresh()?;

    let mut gaps = Vec::new();
    for (name, qm) in [
        ("identity", &identity),
        ("random_orthogonal", &orthogonal),
        ("hadamard", &hadamard),
    ] {
        let outs = block_outputs(model, inputs, &mut qm.exec())?;
        let mut worst = outs
            .iter()
            .zip(&reference)
            .map(|(a, b)| rel_error(a.data(), b.data()))
            .fold(0.0f64, f64::max);
        let pred = qm.predict(inputs)?;
        for (a, b) in [
            (&pred.pose, &ref_pred.pose),
            (&pred.depth, &ref_pred.depth),
            (&pred.points, &ref_pred.points),
        ] {
            worst = worst.max(rel_error(a.data(), b.data()));
        }
        gaps.push((name, worst));
    }
    Ok(gaps)
}
