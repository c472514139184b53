use pxrecon_core::autodiff::{Graph, Var};
use pxrecon_core::fusion::{joint_loss, JointConfig, JointModel, JointTrainConfig, Task, LEVELS};
use pxrecon_core::gradcheck::probe_tensor;
use pxrecon_core::nn::{Ctx, Mode, Store};
use pxrecon_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(task: Task, h: usize, w: usize, d: usize) -> JointConfig {
    JointConfig {
        px_hw: [h, w],
        depth: d,
        widths: [3, 4, 5, 5],
        ..JointConfig::desk(task)
    }
}

fn inputs(g: &mut Graph<f64>, n: usize, cfg: &JointConfig, seed: u64) -> (Var, Var) {
    let [h, w] = cfg.px_hw;
    let px = g.constant(probe_tensor(&[n, 1, h, w], seed));
    let vol = g.constant(probe_tensor(&[n, 1, cfg.depth, h, w], seed + 1));
    (px, vol)
}

fn depth_mean(t: &Tensor<f64>) -> Vec<f64> {
    let s = t.shape();
    let (nc, d, hw) = (s[0] * s[1], s[2], s[3] * s[4]);
    let mut out = vec![0.0; nc * hw];
    for a in 0..nc {
        for k in 0..d {
            for p in 0..hw {
                out[a * hw + p] += t.data()[(a * d + k) * hw + p] / d as f64;
            }
        }
    }
    out
}

#[test]
fn fused_depth_and_mixed_mean_at_every_level() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..6 {
        let (h, w, d) = (rng.random_range(24..33), rng.random_range(24..41), rng.random_range(17..24));
        let n = rng.random_range(1..3);
        let cfg = small(Task::Cls5, h, w, d);
        let mut store = Store::<f64>::new(trial);
        let model = JointModel::new(&mut store, cfg).unwrap();
        let mut g = Graph::new();
        let (px, vol) = inputs(&mut g, n, &cfg, trial);
        let mut ctx = Ctx::new(&mut g, &mut store, Mode::Train);
        let out = model.forward(&mut ctx, px, vol).unwrap();
        drop(ctx);
        assert_eq!(out.fused3d.len(), LEVELS);
        for l in 0..LEVELS {
            let pre = g.value(out.pre3d[l]);
            let fused = g.value(out.fused3d[l]);
            let mixed = g.value(out.mixed2d[l]);
            let (ps, fs) = (pre.shape(), fused.shape());
            assert_eq!(fs[2], ps[2] + 1, "level {l}");
            assert_eq!([fs[0], fs[1], fs[3], fs[4]], [ps[0], ps[1], ps[3], ps[4]]);
            assert_eq!(mixed.shape(), &[fs[0], fs[1], fs[3], fs[4]]);
            let hw = fs[3] * fs[4];
            for a in 0..fs[0] * fs[1] {
                for k in 0..ps[2] {
                    let (fo, po) = ((a * fs[2] + k) * hw, (a * ps[2] + k) * hw);
                    assert_eq!(&fused.data()[fo..fo + hw], &pre.data()[po..po + hw]);
                }
            }
            for (x, y) in mixed.data().iter().zip(depth_mean(fused)) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn shallow_volumes_are_rejected() {
    let cfg = small(Task::Cls5, 32, 32, 16);
    assert_eq!(cfg.level_depths(), [16, 8, 4, 2]);
    assert!(cfg.validate().is_err());
    assert!(JointConfig { fusion: false, ..cfg }.validate().is_ok());
    assert_eq!(small(Task::Cls5, 32, 32, 17).level_depths(), [17, 9, 5, 3]);
}

#[test]
fn classification_logits_and_duplicate_rows() {
    let cfg = small(Task::Cls5, 32, 32, 17);
    let mut store = Store::<f64>::new(3);
    let model = JointModel::new(&mut store, cfg).unwrap();
    let mut g = Graph::new();
    let one_px = probe_tensor(&[1, 1, 32, 32], 5);
    let one_vol = probe_tensor(&[1, 1, 17, 32, 32], 6);
    let px = g.constant(Tensor::stack(&[one_px.index0(0), one_px.index0(0)]).unwrap());
    let vol = g.constant(Tensor::stack(&[one_vol.index0(0), one_vol.index0(0)]).unwrap());
    let mut ctx = Ctx::new(&mut g, &mut store, Mode::Eval);
    let out = model.forward(&mut ctx, px, vol).unwrap();
    drop(ctx);
    let logits = g.value(out.logits);
    assert_eq!(logits.shape(), &[2, 5]);
    assert_eq!(logits.index0(0).data(), logits.index0(1).data());
    let row = logits.index0(0);
    let m = row.data().iter().cloned().fold(f64::MIN, f64::max);
    let z: f64 = row.data().iter().map(|v| (v - m).exp()).sum();
    let p: Vec<f64> = row.data().iter().map(|v| (v - m).exp() / z).collect();
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12 && p.iter().all(|&v| v > 0.0));
    let zz = g.value(out.z.unwrap());
    for r in zz.data().chunks(zz.shape()[1]) {
        assert!((r.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn segmentation_output_matches_input_size() {
    for (h, w) in [(32, 64), (24, 40)] {
        let cfg = small(Task::Seg, h, w, 17);
        let mut store = Store::<f64>::new(0);
        let model = JointModel::new(&mut store, cfg).unwrap();
        let mut g = Graph::new();
        let (px, vol) = inputs(&mut g, 2, &cfg, 9);
        let mut ctx = Ctx::new(&mut g, &mut store, Mode::Train);
        let out = model.forward(&mut ctx, px, vol).unwrap();
        drop(ctx);
        assert_eq!(g.shape(out.logits), &[2, 1, h, w]);
        assert_eq!(g.shape(out.z.unwrap()), g.shape(out.z_star.unwrap()));
    }
}

#[test]
fn lambda_zero_or_no_fusion_leaves_task_loss() {
    for (task, fusion) in [(Task::Cls5, true), (Task::Cls2, false), (Task::Seg, true), (Task::Seg, false)] {
        let cfg = JointConfig { fusion, ..small(task, 32, 32, 17) };
        let mut store = Store::<f64>::new(1);
        let model = JointModel::new(&mut store, cfg).unwrap();
        let mut g = Graph::new();
        let (px, vol) = inputs(&mut g, 2, &cfg, 2);
        let mut ctx = Ctx::new(&mut g, &mut store, Mode::Train);
        let out = model.forward(&mut ctx, px, vol).unwrap();
        drop(ctx);
        let masks = (task == Task::Seg).then(|| g.constant(probe_tensor(&[2, 1, 32, 32], 4).map(|v| (v > 0.0) as u8 as f64)));
        let mut tc = JointTrainConfig::for_task(task, 10);
        tc.lambda = 0.0;
        let loss = joint_loss(&mut g, &out, task, &[0, 1], masks, &tc).unwrap();
        assert!(loss.cma.is_none());
        assert_eq!(g.value(loss.total).item(), g.value(loss.task).item());
        tc.lambda = 0.1;
        let loss = joint_loss(&mut g, &out, task, &[0, 1], masks, &tc).unwrap();
        assert_eq!(loss.cma.is_some(), fusion);
        if let Some(c) = loss.cma {
            let want = g.value(loss.task).item() + 0.1 * g.value(c).item();
            assert!((g.value(loss.total).item() - want).abs() < 1e-12);
        }
    }
}

#[test]
fn contrastive_term_trains_both_branches() {
    for task in [Task::Cls5, Task::Seg] {
        let cfg = small(task, 32, 32, 17);
        let mut store = Store::<f64>::new(2);
        let model = JointModel::new(&mut store, cfg).unwrap();
        let mut g = Graph::new();
        let (px, vol) = inputs(&mut g, 3, &cfg, 7);
        let mut ctx = Ctx::new(&mut g, &mut store, Mode::Train);
        let out = model.forward(&mut ctx, px, vol).unwrap();
        let bound = ctx.bound_params();
        let names: Vec<String> = bound.iter().map(|(id, _)| ctx.store().entries()[id.index()].name.clone()).collect();
        drop(ctx);
        let tc = JointTrainConfig::for_task(task, 10);
        let c = g.cma_loss(out.z.unwrap(), out.z_star.unwrap(), tc.tau, tc.cma_mode).unwrap();
        let grads = g.backward(c).unwrap();
        let touched = |prefix: &str| {
            bound.iter().zip(&names).any(|((_, v), n)| {
                n.starts_with(prefix) && grads.get(*v).is_some_and(|t| t.data().iter().any(|x| x.abs() > 1e-10))
            })
        };
        assert!(touched("b2d."), "{task:?}: 2D branch");
        assert!(touched("b3d."), "{task:?}: 3D branch");
    }
}

#[test]
fn volume_input_changes_trained_logits() {
    use pxrecon_core::fusion::{JointExample, JointTrainer};
    use pxrecon_core::volume::{AxisOrder, Image, Volume};
    let mut data = Vec::new();
    for i in 0..4u64 {
        let px = Image::from_vec(32, 32, probe_tensor(&[32 * 32], i).data().iter().map(|v| v.abs() as f32).collect()).unwrap();
        let mut vol = Volume::zeros([32, 32, 17], [1.0; 3], AxisOrder::Hwd);
        vol.data = probe_tensor(&[32 * 32 * 17], 10 + i).data().iter().map(|v| v.abs() as f32).collect();
        data.push(JointExample::new(&px, &vol, i as usize % 5, None).unwrap());
    }
    let mut tc = JointTrainConfig::for_task(Task::Cls5, 20);
    tc.batch_size = 4;
    let mut tr = JointTrainer::new(small(Task::Cls5, 32, 32, 17), tc).unwrap();
    for _ in 0..20 {
        tr.train_step(&data).unwrap();
    }
    let with = tr.predict_logits(&data, &[0]).unwrap();
    let mut blank = data.clone();
    blank[0].vol = Tensor::zeros(blank[0].vol.shape());
    let without = tr.predict_logits(&blank, &[0]).unwrap();
    let linf = with[0].data().iter().zip(without[0].data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(linf > 0.0);
}
