use pxrecon_core::autodiff::Graph;
use pxrecon_core::geometry::{project_panoramic, reformat_unfolded, ProjectionConfig};
use pxrecon_core::gradcheck::probe_tensor;
use pxrecon_core::metrics::psnr;
use pxrecon_core::nn::{Ctx, Mode, Store};
use pxrecon_core::phantom::{generate_phantom, PhantomConfig};
use pxrecon_core::pgr::*;
use pxrecon_core::volume::{resample_3d, AxisOrder, Image, Volume};
use pxrecon_core::{Error, Tensor};

fn stage_shapes(cfg: PgrConfig, n: usize) -> Vec<Vec<usize>> {
    let mut store = Store::<f32>::new(0);
    let model = PgrModel::new(&mut store, cfg).unwrap();
    let mut g = Graph::new();
    let [h, w] = cfg.input_hw;
    let x = g.constant(probe_tensor(&[n, 1, h, w], 1).cast());
    let mut ctx = Ctx::new(&mut g, &mut store, Mode::Eval);
    let out = model.forward(&mut ctx, x).unwrap();
    drop(ctx);
    out.stages.iter().map(|&v| g.shape(v).to_vec()).collect()
}

#[test]
fn full_scale_stage_shapes() {
    let s = stage_shapes(PgrConfig::full(), 1);
    assert_eq!(s[3], [1, 128, 16, 32]);
    assert_eq!(s[5], [1, 128, 32, 64]);
    assert_eq!(s[7], [1, 128, 128, 256]);
    assert!(s[..3].iter().all(|sh| sh[1] < 128));
}

#[test]
fn desk_stage_shapes_follow_config() {
    let cfg = PgrConfig::desk();
    for (i, sh) in stage_shapes(cfg, 2).iter().enumerate() {
        let [h, w] = cfg.stage_hw(i);
        assert_eq!(sh, &[2, cfg.stage_channels(i), h, w], "stage {i}");
    }
    let mut store = Store::<f32>::new(0);
    PgrModel::new(&mut store, cfg).unwrap();
    assert_eq!(store.num_params(), 184_304);
}

#[test]
fn forward_is_deterministic() {
    let px = Image::from_vec(32, 64, probe_tensor(&[32 * 64], 4).data().iter().map(|v| v.abs() as f32).collect()).unwrap();
    let run = || {
        let mut store = Store::<f32>::new(7);
        let model = PgrModel::new(&mut store, PgrConfig::desk()).unwrap();
        predict_volume(&model, &mut store, &px).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.dims, [32, 64, 32]);
    assert_eq!(a.data, b.data);
}

fn desk_pair(seed: u64) -> (Image, Volume) {
    let p = generate_phantom(&PhantomConfig::desk().with_seed(seed)).unwrap();
    let pc = ProjectionConfig::desk();
    (
        project_panoramic(&p.volume, &p.arch_curve, &pc).unwrap(),
        reformat_unfolded(&p.volume, &p.arch_curve, &pc).unwrap(),
    )
}

#[test]
fn labels_at_output_stage_are_the_volume() {
    let cfg = PgrConfig::desk();
    let (_, gt) = desk_pair(0);
    let l7 = scale_label(&gt, 7, &cfg).unwrap();
    assert_eq!(l7.shape(), &[32, 32, 64]);
    assert_eq!(dhw_to_hwd(l7.data(), [32, 32, 64]), gt.data);
    assert_eq!(scale_label(&gt, 4, &cfg).unwrap().shape(), &[32, 4, 8]);
    assert_eq!(scale_label(&gt, 5, &cfg).unwrap().shape(), &[32, 8, 16]);
    for s in [0, 1, 2, 8] {
        assert!(matches!(scale_label(&gt, s, &cfg), Err(Error::UnsupportedStage { .. })));
    }
    let flat = Volume::from_vec([32, 64, 32], [1.0; 3], AxisOrder::Hwd, vec![0.37; 32 * 64 * 32]).unwrap();
    for s in 3..STAGES {
        assert!(scale_label(&flat, s, &cfg).unwrap().data().iter().all(|&v| (v - 0.37).abs() < 1e-6));
    }
}

fn stage_five_round_trip(gt: &Volume) -> f64 {
    let cfg = PgrConfig::full();
    let l5 = scale_label(gt, 5, &cfg).unwrap();
    let up = resample_3d(l5.data(), [128, 32, 64], [128, 128, 256]);
    psnr(&up, &hwd_to_dhw(&gt.data, gt.dims)).unwrap()
}

#[test]
fn stage_five_round_trip_on_smooth_volume() {
    let (h, w, d) = (128, 256, 128);
    let mut data = Vec::with_capacity(h * w * d);
    for y in 0..h {
        for x in 0..w {
            for z in 0..d {
                let (fy, fx, fz) = (y as f64 / h as f64, x as f64 / w as f64, z as f64 / d as f64);
                let v = 0.5 + 0.2 * (6.0 * fx + 1.0).sin() * (4.0 * fy).cos() + 0.2 * (3.0 * fz + 2.0 * fy).sin();
                data.push(v as f32);
            }
        }
    }
    let gt = Volume::from_vec([h, w, d], [0.2; 3], AxisOrder::Hwd, data).unwrap();
    let p = stage_five_round_trip(&gt);
    assert!(p >= 30.0, "{p}");
}

#[test]
fn stage_five_round_trip_on_phantoms() {
    let pc = ProjectionConfig::default();
    for seed in 0..10 {
        let p = generate_phantom(&PhantomConfig::full().with_seed(100 + seed)).unwrap();
        let gt = reformat_unfolded(&p.volume, &p.arch_curve, &pc).unwrap();
        let v = stage_five_round_trip(&gt);
        assert!(v >= 29.0, "seed {seed}: {v}");
    }
}

fn loss_value(alphas: Vec<f64>, per: &[f64]) -> (f64, Vec<Option<f64>>) {
    // stage f and label y differ by a constant c, so sse = c^2 * len / N
    let mut g = Graph::<f64>::new();
    let mut stages = Vec::new();
    let mut labels = Vec::new();
    for &v in per {
        stages.push(g.constant(Tensor::full(&[1, 1, 1, 1], v.sqrt())));
        labels.push(Some(g.constant(Tensor::zeros(&[1, 1, 1, 1]))));
    }
    let l = progressive_loss(&mut g, &stages, &labels, &WeightSchedule { alphas }).unwrap();
    (g.value(l.total).item(), l.per_stage.iter().map(|v| v.map(|v| g.value(v).item())).collect())
}

#[test]
fn alpha_schedules() {
    assert_eq!(WeightSchedule::new(AlphaSchedule::Paper).alphas, [0.0, 0.0, 0.0, 16.0, 8.0, 4.0, 2.0, 1.0]);
    assert_eq!(WeightSchedule::new(AlphaSchedule::Reversed).alphas, [0.0, 0.0, 0.0, 1.0, 2.0, 4.0, 8.0, 16.0]);
    let (total, _) = loss_value(WeightSchedule::new(AlphaSchedule::Paper).alphas, &[1.0; STAGES]);
    assert_eq!(total, 31.0);
    let per: Vec<f64> = (0..STAGES).map(|i| 0.25 + i as f64).collect();
    let (full, parts) = loss_value(WeightSchedule::new(AlphaSchedule::Paper).alphas, &per);
    let mut sum = 0.0;
    for i in 3..STAGES {
        let oh = WeightSchedule::one_hot(i, WeightSchedule::new(AlphaSchedule::Paper).alphas[i]);
        let (v, p) = loss_value(oh.alphas, &per);
        assert!(p.iter().enumerate().all(|(j, x)| x.is_some() == (j == i)));
        assert!((p[i].unwrap() - parts[i].unwrap()).abs() < 1e-12);
        sum += v;
    }
    assert!((full - sum).abs() < 1e-12);
    assert!(parts[..3].iter().all(Option::is_none));
}

#[test]
fn unguidable_stages_are_rejected() {
    let cfg = PgrConfig::desk();
    let bad = WeightSchedule::one_hot(1, 1.0);
    assert!(matches!(bad.validate(&cfg), Err(Error::Config { field: "alphas", .. })));
    assert!(WeightSchedule { alphas: vec![1.0; 3] }.validate(&cfg).is_err());
    assert!(WeightSchedule::new(AlphaSchedule::Paper).validate(&cfg).is_ok());
}

#[test]
fn guidance_reaches_the_stem() {
    let cfg = PgrConfig::desk();
    let mut store = Store::<f32>::new(2);
    let model = PgrModel::new(&mut store, cfg).unwrap();
    let (px, gt) = desk_pair(3);
    let w = WeightSchedule::new(AlphaSchedule::Paper);
    let ex = ReconExample::new(&px, &gt, &cfg, &w).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::stack(&[ex.px.clone()]).unwrap());
    let labels: Vec<_> = ex.labels.iter().map(|l| l.as_ref().map(|t| g.constant(Tensor::stack(&[t.clone()]).unwrap()))).collect();
    let mut ctx = Ctx::new(&mut g, &mut store, Mode::Train);
    let out = model.forward(&mut ctx, x).unwrap();
    let bound = ctx.bound_params();
    let stem = bound
        .iter()
        .find(|(id, _)| ctx.store().entries()[id.index()].name.starts_with("stem"))
        .map(|&(_, v)| v)
        .unwrap();
    drop(ctx);
    let loss = progressive_loss(&mut g, &out.stages, &labels, &w).unwrap();
    let grads = g.backward(loss.total).unwrap();
    assert!(grads.get(stem).unwrap().data().iter().any(|v| v.abs() > 0.0));
}

fn tiny_trainer(seed: u64) -> PgrTrainer {
    PgrTrainer::new(PgrConfig::desk(), PgrTrainConfig { steps: 3, batch_size: 2, seed, ..Default::default() }).unwrap()
}

#[test]
fn training_is_reproducible_and_zero_steps_is_init() {
    let cfg = PgrConfig::desk();
    let data: Vec<ReconExample> = (0..3)
        .map(|s| {
            let (px, gt) = desk_pair(s);
            ReconExample::new(&px, &gt, &cfg, &WeightSchedule::new(AlphaSchedule::Paper)).unwrap()
        })
        .collect();
    let (mut a, mut b) = (tiny_trainer(5), tiny_trainer(5));
    let init = tiny_trainer(5);
    for e in init.store.entries().iter().zip(a.store.entries()) {
        assert_eq!(e.0.value.data(), e.1.value.data());
    }
    for _ in 0..3 {
        let (la, lb) = (a.train_step(&data).unwrap(), b.train_step(&data).unwrap());
        assert_eq!(la, lb);
        assert!(la.total.is_finite() && la.batch.len() == 2);
    }
    for (x, y) in a.store.entries().iter().zip(b.store.entries()) {
        assert_eq!(x.value.data(), y.value.data(), "{}", x.name);
    }
    let changed = a.store.entries().iter().zip(init.store.entries()).any(|(x, y)| x.value.data() != y.value.data());
    assert!(changed);
}
