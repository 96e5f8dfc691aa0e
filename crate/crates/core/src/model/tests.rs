use super::*;
use crate::model::data::gather;

fn small() -> ToyModelConfig {
    ToyModelConfig {
        tokens_per_view: 4,
        hidden_dim: 8,
        mlp_dim: 16,
        aa_pairs: 1,
        ..Default::default()
    }
}

#[test]
fn output_and_hook_shapes() {
    let cfg = ToyModelConfig::default();
    let model = ToyModel::<f64>::new(cfg.clone()).unwrap();
    let data: SyntheticDataset<f64> = generate_dataset(&cfg, 2, 42).unwrap();
    let mut tape = Tape::new();
    let bm = model.bind(&mut tape, false);
    let x = tape.constant(data.inputs.clone());
    let tr = model
        .forward(&mut tape, &bm, x, &mut FullPrecision, true)
        .unwrap();
    assert_eq!(tape.shape(tr.outputs.pose), &[2, cfg.pose_dim]);
    assert_eq!(tape.shape(tr.outputs.depth), &[2, 2, 16]);
    assert_eq!(tape.shape(tr.outputs.points), &[2, 2, 16, 3]);
    assert_eq!(tr.hooks.len(), 6);
    for h in &tr.hooks {
        assert_eq!(tape.shape(*h), &[2, 34, 32]);
    }
}

#[test]
fn n1_dataset_shapes() {
    let cfg = ToyModelConfig::default();
    let d: SyntheticDataset<f64> = generate_dataset(&cfg, 1, 42).unwrap();
    assert_eq!(d.inputs.shape(), &[1, 2, 16, cfg.in_dim]);
    assert_eq!(d.targets.pose.shape(), &[1, cfg.pose_dim]);
    assert_eq!(d.targets.depth.shape(), &[1, 2, 16]);
    assert_eq!(d.targets.points.shape(), &[1, 2, 16, 3]);
    assert!(generate_dataset::<f64>(&cfg, 0, 42).is_err());
}

#[test]
fn dataset_determinism_and_noise_isolation() {
    let cfg = ToyModelConfig::default();
    let a: SyntheticDataset<f64> = generate_dataset(&cfg, 64, 42).unwrap();
    let b: SyntheticDataset<f64> = generate_dataset(&cfg, 64, 42).unwrap();
    assert_eq!(a, b);
    let quiet = |noise_seed| DataSpec {
        seed: 42,
        noise_std: 0.0,
        noise_seed,
    };
    let c = SyntheticDataset::<f64>::generate(&cfg, &quiet(1), 0, 8).unwrap();
    let d = SyntheticDataset::<f64>::generate(&cfg, &quiet(2), 0, 8).unwrap();
    assert_eq!(c, d);
    // a later range reproduces the tail of a longer draw
    let tail = SyntheticDataset::<f64>::generate(&cfg, &DataSpec::new(42), 60, 4).unwrap();
    assert_eq!(tail.inputs, gather(&a.inputs, &[60, 61, 62, 63]).unwrap());
}

fn block_states(model: &ToyModel<f64>, x: &Tensor<f64>) -> Vec<Tensor<f64>> {
    let mut tape = Tape::new();
    let bm = model.bind(&mut tape, false);
    let xin = tape.constant(x.clone());
    let tr = model
        .forward(&mut tape, &bm, xin, &mut FullPrecision, false)
        .unwrap();
    tr.hooks.iter().map(|h| tape.value(*h).clone()).collect()
}

#[test]
fn frame_attention_is_local_global_is_not() {
    let cfg = small();
    let model = ToyModel::<f64>::new(cfg.clone()).unwrap();
    let data: SyntheticDataset<f64> = generate_dataset(&cfg, 1, 7).unwrap();
    let mut zeroed = data.inputs.clone();
    let half = zeroed.len() / 2;
    zeroed.data_mut()[half..].iter_mut().for_each(|v| *v = 0.0);
    let a = block_states(&model, &data.inputs);
    let b = block_states(&model, &zeroed);
    let view = cfg.view_tokens() * cfg.hidden_dim;
    assert_eq!(&a[0].data()[..view], &b[0].data()[..view]);
    assert_ne!(&a[1].data()[..view], &b[1].data()[..view]);
}

#[test]
fn swapping_views_permutes_dense_outputs() {
    let cfg = small();
    let model = ToyModel::<f64>::new(cfg.clone()).unwrap();
    let data: SyntheticDataset<f64> = generate_dataset(&cfg, 1, 3).unwrap();
    // Swap both the inputs and the per-view special tokens so the views are
    // exchanged wholesale.
    let swap = |t: &Tensor<f64>| {
        let h = t.len() / 2;
        let mut d = t.data()[h..].to_vec();
        d.extend_from_slice(&t.data()[..h]);
        Tensor::new(t.shape(), d).unwrap()
    };
    let mut swapped_model = model.clone();
    swapped_model.special_tokens = swap(&model.special_tokens);
    let a = model.predict(&data.inputs).unwrap();
    let b = swapped_model.predict(&swap(&data.inputs)).unwrap();
    let close = |x: &Tensor<f64>, y: &Tensor<f64>| rel_error(x.data(), y.data()) < 1e-12;
    assert!(close(&swap(&a.depth), &b.depth));
    assert!(close(&swap(&a.points), &b.points));
    assert!(close(&a.pose, &b.pose));
}

use crate::tensor::rel_error;

#[test]
fn zero_heads_give_zero_outputs() {
    let cfg = small();
    let mut model = ToyModel::<f64>::new(cfg.clone()).unwrap();
    model.pose_head.zero();
    model.depth_head.zero();
    model.point_head.zero();
    let data: SyntheticDataset<f64> = generate_dataset(&cfg, 3, 1).unwrap();
    let out = model.predict(&data.inputs).unwrap();
    for t in [&out.pose, &out.depth, &out.points] {
        assert!(t.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn hooks_feed_next_block() {
    let cfg = small();
    let model = ToyModel::<f64>::new(cfg.clone()).unwrap();
    let data: SyntheticDataset<f64> = generate_dataset(&cfg, 2, 5).unwrap();
    let mut tape = Tape::new();
    let bm = model.bind(&mut tape, false);
    let x = tape.constant(data.inputs.clone());
    let tr = model
        .forward(&mut tape, &bm, x, &mut FullPrecision, false)
        .unwrap();
    let h0 = tape.constant(tape.value(tr.hooks[0]).clone());
    let again = block_forward(&mut tape, &cfg, 1, &bm.blocks[1], h0, &mut FullPrecision).unwrap();
    assert_eq!(tape.value(again), tape.value(tr.hooks[1]));
}

#[test]
fn task_losses_match_loop_oracle() {
    let cfg = small();
    let model = ToyModel::<f64>::new(cfg.clone()).unwrap();
    let data: SyntheticDataset<f64> = generate_dataset(&cfg, 3, 9).unwrap();
    let out = model.predict(&data.inputs).unwrap();
    let l = task_loss_values(&out, &data.targets).unwrap();
    let oracle = |p: &Tensor<f64>, t: &Tensor<f64>| {
        let mut s = 0.0;
        for i in 0..p.len() {
            s += (p.data()[i] - t.data()[i]).powi(2);
        }
        s / p.len() as f64
    };
    assert!((l.camera - oracle(&out.pose, &data.targets.pose)).abs() <= 1e-12);
    assert!((l.depth - oracle(&out.depth, &data.targets.depth)).abs() <= 1e-12);
    assert!((l.point - oracle(&out.points, &data.targets.points)).abs() <= 1e-12);

    let exact = Targets {
        pose: out.pose.clone(),
        depth: out.depth.map(|v| v + 1.0),
        points: out.points.clone(),
    };
    let l = task_loss_values(&out, &exact).unwrap();
    assert_eq!((l.camera, l.point), (0.0, 0.0));
    assert!((l.depth - 1.0).abs() < 1e-12);

    let mut tape = Tape::new();
    let bm = model.bind(&mut tape, false);
    let x = tape.constant(data.inputs.clone());
    let tr = model
        .forward(&mut tape, &bm, x, &mut FullPrecision, false)
        .unwrap();
    let lv = task_losses(&mut tape, &tr.outputs, &data.targets).unwrap();
    let direct = task_loss_values(&out, &data.targets).unwrap();
    assert_eq!(tape.item(lv.depth), direct.depth);
}

#[test]
fn zero_steps_leave_model_unchanged() {
    let cfg = small();
    let mut model = ToyModel::<f64>::new(cfg.clone()).unwrap();
    let before = model.clone();
    let data: SyntheticDataset<f64> = generate_dataset(&cfg, 4, 1).unwrap();
    let tc = TrainConfig {
        steps: 0,
        ..Default::default()
    };
    let r = train_toy(&mut model, &data, &tc).unwrap();
    assert!(r.trace.is_empty());
    assert_eq!(model, before);
}

#[test]
fn short_training_reduces_loss() {
    let cfg = small();
    let mut model = ToyModel::<f64>::new(cfg.clone()).unwrap();
    let data: SyntheticDataset<f64> = generate_dataset(&cfg, 16, 1).unwrap();
    let tc = TrainConfig {
        steps: 40,
        batch_size: 4,
        lr: 1e-2,
        ..Default::default()
    };
    let r = train_toy(&mut model, &data, &tc).unwrap();
    assert_eq!(r.trace.len(), 40);
    assert!(r.final_loss < r.initial_loss);
    assert!(r.final_grad_norm.is_finite());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = small();
    let model = ToyModel::<f64>::new(cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    model.save(&p).unwrap();
    let back = ToyModel::<f64>::load(&p).unwrap();
    assert_eq!(model, back);
}

#[test]
fn special_token_mask_marks_first_row_of_each_view() {
    let cfg = small();
    let m = cfg.special_token_mask();
    assert_eq!(m.len(), 10);
    assert!(m[0] && m[5]);
    assert_eq!(m.iter().filter(|&&b| b).count(), 2);
}

#[test]
fn rejects_bad_config_and_input() {
    let bad = ToyModelConfig {
        hidden_dim: 24,
        ..Default::default()
    };
    assert!(ToyModel::<f64>::new(bad).is_err());
    let model = ToyModel::<f64>::new(small()).unwrap();
    assert!(model.predict(&Tensor::zeros(&[1, 2, 3, 8])).is_err());
}
