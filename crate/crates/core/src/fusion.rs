//! 2D-3D joint analysis: parallel 2D and 3D convolutional pyramids that
//! exchange features at every level, a contrastive alignment loss between
//! the branches, and classification or segmentation heads.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{CmaMode, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{param_grads, Conv, ConvBlock, Ctx, Dims, Linear, Mode, Store};
use crate::optim::{batch_indices, Adam, LrSchedule};
use crate::pgr::hwd_to_dhw;
use crate::tensor::Tensor;
use crate::volume::{AxisOrder, Image, Volume};
use crate::Real;

pub const LEVELS: usize = 4;

impl<T: Real> Graph<T> {
    /// Appends `f2d[N,C,H,W]` to `f3d[N,C,D,H,W]` as a last depth slice and
    /// averages the `D + 1` slices back into a 2D map.
    pub fn depth_fuse(&mut self, f2d: Var, f3d: Var) -> Result<(Var, Var)> {
        let s2 = self.shape(f2d).to_vec();
        let s3 = self.shape(f3d).to_vec();
        if s2.len() != 4 || s3.len() != 5 || s2[0] != s3[0] || s2[1] != s3[1] || s2[2..] != s3[3..] {
            return Err(Error::shape("depth_fuse", &s2, &s3));
        }
        let slice = self.reshape(f2d, &[s2[0], s2[1], 1, s2[2], s2[3]])?;
        let f3d_mixed = self.concat(&[f3d, slice], 2)?;
        let f2d_mixed = self.mean_axis(f3d_mixed, 2)?;
        Ok((f2d_mixed, f3d_mixed))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Cls2,
    Cls5,
    Seg,
}

impl Task {
    pub fn classes(self) -> Option<usize> {
        match self {
            Task::Cls2 => Some(2),
            Task::Cls5 => Some(5),
            Task::Seg => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointConfig {
    /// `(H, W)` of the panoramic input.
    pub px_hw: [usize; 2],
    /// Depth of the unfolded volume input.
    pub depth: usize,
    pub widths: [usize; LEVELS],
    pub task: Task,
    /// Level whose features feed the contrastive loss: an encoder level for
    /// classification, a decoder block index for segmentation.
    pub cma_tap: usize,
    /// `false` drops the 3D branch entirely (2D-only baseline).
    pub fusion: bool,
}

impl JointConfig {
    pub fn full(task: Task) -> Self {
        JointConfig {
            px_hw: [128, 256],
            depth: 128,
            widths: [32, 64, 128, 128],
            task,
            cma_tap: Self::default_tap(task),
            fusion: true,
        }
    }

    pub fn desk(task: Task) -> Self {
        JointConfig {
            px_hw: [32, 64],
            depth: 32,
            widths: [8, 16, 32, 32],
            ..Self::full(task)
        }
    }

    /// Last encoder level for classification, second decoder block for
    /// segmentation.
    pub fn default_tap(task: Task) -> usize {
        match task {
            Task::Seg => 1,
            _ => LEVELS - 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.px_hw.iter().any(|&d| d < 24) {
            return Err(Error::config("px_hw", "inputs too small for three poolings"));
        }
        if self.fusion && self.level_depths().iter().any(|&d| d < 3) {
            return Err(Error::config("depth", "volume too shallow for three poolings of the fused depth"));
        }
        if self.widths.contains(&0) {
            return Err(Error::config("widths", "must be positive"));
        }
        let taps = if self.task == Task::Seg { LEVELS - 1 } else { LEVELS };
        if self.cma_tap >= taps {
            return Err(Error::config("cma_tap", format!("must be below {taps}")));
        }
        Ok(())
    }

    /// Pre-fusion 3D depth at each level; fusing adds one slice before the
    /// next pooling halves it.
    pub fn level_depths(&self) -> [usize; LEVELS] {
        let mut out = [self.depth; LEVELS];
        for l in 1..LEVELS {
            out[l] = (out[l - 1] + 1) / 2;
        }
        out
    }

    /// 3D branch level whose features pair with the segmentation decoder
    /// block `tap` (same spatial size and width).
    fn seg_tap_level(&self) -> usize {
        LEVELS - 2 - self.cma_tap
    }
}

#[derive(Debug, Clone)]
pub struct JointModel {
    pub cfg: JointConfig,
    enc2d: Vec<ConvBlock>,
    enc3d: Vec<ConvBlock>,
    classifier: Option<Linear>,
    decoder: Vec<ConvBlock>,
    seg_out: Option<Conv>,
}

#[derive(Debug, Clone)]
pub struct JointOutputs {
    /// `[N, K]` class logits or `[N, 1, H, W]` pixel logits.
    pub logits: Var,
    /// Unit-norm 2D and 3D embeddings `[N, C]` at the tap.
    pub z: Option<Var>,
    pub z_star: Option<Var>,
    /// Fused 3D features per level, `[N, C, D + 1, H, W]`.
    pub fused3d: Vec<Var>,
    /// Depth-averaged 2D features per level.
    pub mixed2d: Vec<Var>,
    /// Pre-fusion 3D features per level.
    pub pre3d: Vec<Var>,
}

impl JointModel {
    pub fn new<T: Real>(store: &mut Store<T>, cfg: JointConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.widths;
        let mut enc2d = Vec::new();
        let mut enc3d = Vec::new();
        let mut cin = 1;
        for (l, &c) in w.iter().enumerate() {
            enc2d.push(ConvBlock::new(store, &format!("b2d.{l}"), cin, c, Dims::Two));
            if cfg.fusion {
                enc3d.push(ConvBlock::new(store, &format!("b3d.{l}"), cin, c, Dims::Three));
            }
            cin = c;
        }
        let (classifier, decoder, seg_out) = match cfg.task.classes() {
            Some(k) => (Some(Linear::new(store, "head", w[LEVELS - 1], k)), Vec::new(), None),
            None => {
                let mut dec = Vec::new();
                let mut cin = w[LEVELS - 1];
                for j in 0..LEVELS - 1 {
                    let lvl = LEVELS - 2 - j;
                    dec.push(ConvBlock::new(store, &format!("dec.{j}"), cin + w[lvl], w[lvl], Dims::Two));
                    cin = w[lvl];
                }
                (None, dec, Some(Conv::new(store, "seg_out", cin, 1, 1, Dims::Two)))
            }
        };
        Ok(JointModel {
            cfg,
            enc2d,
            enc3d,
            classifier,
            decoder,
            seg_out,
        })
    }

    /// `px[N,1,H,W]` and `vol[N,1,D,H,W]` (ignored without fusion).
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, '_, T>, px: Var, vol: Var) -> Result<JointOutputs> {
        let [h, w] = self.cfg.px_hw;
        let sp = ctx.g.shape(px).to_vec();
        if sp.len() != 4 || sp[1..] != [1, h, w] {
            return Err(Error::shape("joint_forward", &[sp.first().copied().unwrap_or(0), 1, h, w], &sp));
        }
        if self.cfg.fusion {
            let sv = ctx.g.shape(vol).to_vec();
            let want = [sp[0], 1, self.cfg.depth, h, w];
            if sv != want {
                return Err(Error::shape("joint_forward", &want, &sv));
            }
        }
        let (mut x2, mut x3) = (px, vol);
        let mut mixed2d = Vec::new();
        let mut fused3d = Vec::new();
        let mut pre3d = Vec::new();
        let mut pre2d = Vec::new();
        for l in 0..LEVELS {
            if l > 0 {
                x2 = ctx.g.maxpool2d(x2)?;
                if self.cfg.fusion {
                    x3 = ctx.g.maxpool3d(x3)?;
                }
            }
            let f2 = self.enc2d[l].forward(ctx, x2)?;
            pre2d.push(f2);
            if self.cfg.fusion {
                let f3 = self.enc3d[l].forward(ctx, x3)?;
                let (m2, m3) = ctx.g.depth_fuse(f2, f3)?;
                pre3d.push(f3);
                mixed2d.push(m2);
                fused3d.push(m3);
                x2 = m2;
                x3 = m3;
            } else {
                mixed2d.push(f2);
                x2 = f2;
            }
        }
        let top = mixed2d[LEVELS - 1];
        let (logits, tap2d, tap3d) = if let Some(head) = &self.classifier {
            let pooled = ctx.g.global_avg_pool(top)?;
            let logits = head.forward(ctx, pooled)?;
            let t = self.cfg.cma_tap;
            (logits, pre2d[t], pre3d.get(t).copied())
        } else {
            let mut cur = top;
            let mut dec_out = Vec::new();
            for (j, block) in self.decoder.iter().enumerate() {
                let skip = mixed2d[LEVELS - 2 - j];
                let ss = ctx.g.shape(skip).to_vec();
                let up = ctx.g.upsample2d_to(cur, ss[2], ss[3])?;
                let cat = ctx.g.concat(&[up, skip], 1)?;
                cur = block.forward(ctx, cat)?;
                dec_out.push(cur);
            }
            let logits = self.seg_out.as_ref().expect("segmentation head").forward(ctx, cur)?;
            let t = self.cfg.cma_tap;
            (logits, dec_out[t], pre3d.get(self.cfg.seg_tap_level()).copied())
        };
        let (z, z_star) = match tap3d {
            Some(t3) => {
                let a = ctx.g.global_avg_pool(tap2d)?;
                let b = ctx.g.global_avg_pool(t3)?;
                (Some(ctx.g.l2_normalize(a)?), Some(ctx.g.l2_normalize(b)?))
            }
            None => (None, None),
        };
        Ok(JointOutputs {
            logits,
            z,
            z_star,
            fused3d,
            mixed2d,
            pre3d,
        })
    }
}

/// `(H, W, D)` unfolded volume as a `[1, D, H, W]` network input.
pub fn volume_input(vol: &Volume) -> Result<Tensor<f32>> {
    if vol.axes != AxisOrder::Hwd {
        return Err(Error::Geometry("joint model expects an HWD volume".into()));
    }
    let [h, w, d] = vol.dims;
    Tensor::from_vec(&[1, d, h, w], hwd_to_dhw(&vol.data, vol.dims))
}

#[derive(Debug, Clone)]
pub struct JointExample {
    /// `[1, H, W]`.
    pub px: Tensor<f32>,
    /// `[1, D, H, W]`.
    pub vol: Tensor<f32>,
    pub class_id: usize,
    /// `[1, H, W]` binary lesion mask.
    pub mask: Option<Tensor<f32>>,
}

impl JointExample {
    pub fn new(px: &Image, vol: &Volume, class_id: usize, mask: Option<&Image>) -> Result<Self> {
        Ok(JointExample {
            px: Tensor::from_vec(&[1, px.h, px.w], px.data.clone())?,
            vol: volume_input(vol)?,
            class_id,
            mask: mask
                .map(|m| Tensor::from_vec(&[1, m.h, m.w], m.data.clone()))
                .transpose()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub tau: f64,
    pub lambda: f64,
    pub cma_mode: CmaMode,
    pub seed: u64,
}

impl JointTrainConfig {
    pub fn for_task(task: Task, steps: u64) -> Self {
        JointTrainConfig {
            steps,
            batch_size: 8,
            schedule: match task {
                Task::Seg => LrSchedule::segmentation(steps),
                _ => LrSchedule::classification(),
            },
            tau: 0.1,
            lambda: 0.1,
            cma_mode: CmaMode::Literal,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointStepLog {
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub task: f64,
    pub cma: Option<f64>,
    pub batch: Vec<usize>,
}

/// Loss terms of one joint forward pass.
pub struct JointLoss {
    pub total: Var,
    pub task: Var,
    pub cma: Option<Var>,
}

/// Task loss plus `lambda` times the contrastive term; with `lambda = 0` or
/// without fusion the total is the task loss itself.
pub fn joint_loss<T: Real>(
    g: &mut Graph<T>,
    out: &JointOutputs,
    task: Task,
    classes: &[usize],
    masks: Option<Var>,
    cfg: &JointTrainConfig,
) -> Result<JointLoss> {
    let task_loss = match task {
        Task::Seg => {
            let m = masks.ok_or_else(|| Error::config("task", "segmentation needs lesion masks"))?;
            let dice = g.soft_dice_loss(out.logits, m)?;
            let bce = g.bce_with_logits(out.logits, m)?;
            g.combine(&[(dice, T::of(0.5)), (bce, T::of(0.5))])?
        }
        _ => g.cross_entropy(out.logits, classes)?,
    };
    let cma = match (out.z, out.z_star) {
        (Some(z), Some(zs)) if cfg.lambda != 0.0 => Some(g.cma_loss(z, zs, cfg.tau, cfg.cma_mode)?),
        _ => None,
    };
    let total = match cma {
        Some(c) => g.combine(&[(task_loss, T::one()), (c, T::of(cfg.lambda))])?,
        None => task_loss,
    };
    Ok(JointLoss {
        total,
        task: task_loss,
        cma,
    })
}

#[derive(Debug, Clone)]
pub struct JointTrainer {
    pub model: JointModel,
    pub store: Store<f32>,
    pub opt: Adam<f32>,
    pub cfg: JointTrainConfig,
    pub step: u64,
}

impl JointTrainer {
    pub fn new(model_cfg: JointConfig, cfg: JointTrainConfig) -> Result<Self> {
        if cfg.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(cfg.tau > 0.0) {
            return Err(Error::config("tau", "must be positive"));
        }
        if model_cfg.fusion && cfg.lambda != 0.0 && cfg.cma_mode == CmaMode::Literal && cfg.batch_size < 2 {
            return Err(Error::config("batch_size", "contrastive loss needs at least 2 samples per batch"));
        }
        let mut store = Store::new(cfg.seed);
        let model = JointModel::new(&mut store, model_cfg)?;
        let opt = Adam::new(&store);
        Ok(JointTrainer {
            model,
            store,
            opt,
            cfg,
            step: 0,
        })
    }

    fn inputs(&self, g: &mut Graph<f32>, data: &[JointExample], idx: &[usize]) -> Result<(Var, Var)> {
        let px = Tensor::stack(&idx.iter().map(|&i| data[i].px.clone()).collect::<Vec<_>>())?;
        let vol = if self.model.cfg.fusion {
            Tensor::stack(&idx.iter().map(|&i| data[i].vol.clone()).collect::<Vec<_>>())?
        } else {
            Tensor::zeros(&[idx.len(), 1, 1, 1, 1])
        };
        Ok((g.constant(px), g.constant(vol)))
    }

    pub fn train_step(&mut self, data: &[JointExample]) -> Result<JointStepLog> {
        if data.is_empty() {
            return Err(Error::config("manifest", "no training samples"));
        }
        let batch = batch_indices(self.cfg.seed, self.step, self.cfg.batch_size, data.len());
        let step = self.step;
        let lr = self.cfg.schedule.lr(step);
        let diverged = |e: Error| match e {
            Error::NonFinite { .. } => Error::Diverged {
                step,
                batch: batch.clone(),
                cause: format!("{e}"),
            },
            other => other,
        };
        let task = self.model.cfg.task;
        let classes: Vec<usize> = batch.iter().map(|&i| data[i].class_id).collect();
        let mut g = Graph::new();
        let masks = if task == Task::Seg {
            let parts: Option<Vec<Tensor<f32>>> = batch.iter().map(|&i| data[i].mask.clone()).collect();
            let parts = parts.ok_or_else(|| Error::config("task", "segmentation sample without lesion mask"))?;
            let t = Tensor::stack(&parts)?;
            Some(g.constant(t))
        } else {
            None
        };
        let (px, vol) = self.inputs(&mut g, data, &batch)?;
        let mut ctx = Ctx::new(&mut g, &mut self.store, Mode::Train);
        let out = self.model.forward(&mut ctx, px, vol).map_err(diverged)?;
        let bound = ctx.bound_params();
        drop(ctx);
        let loss = joint_loss(&mut g, &out, task, &classes, masks, &self.cfg).map_err(diverged)?;
        let mut grads = g.backward(loss.total).map_err(diverged)?;
        let pg = param_grads(&bound, &mut grads);
        self.opt.step(&mut self.store, &pg, lr)?;
        self.step += 1;
        Ok(JointStepLog {
            step,
            lr,
            total: g.value(loss.total).item() as f64,
            task: g.value(loss.task).item() as f64,
            cma: loss.cma.map(|c| g.value(c).item() as f64),
            batch,
        })
    }

    /// Eval-mode logits for the given samples, in chunks of `batch_size`.
    pub fn predict_logits(&mut self, data: &[JointExample], idx: &[usize]) -> Result<Vec<Tensor<f32>>> {
        let mut out = Vec::with_capacity(idx.len());
        for chunk in idx.chunks(self.cfg.batch_size.max(1)) {
            let mut g = Graph::new();
            let (px, vol) = self.inputs(&mut g, data, chunk)?;
            let mut ctx = Ctx::new(&mut g, &mut self.store, Mode::Eval);
            let o = self.model.forward(&mut ctx, px, vol)?;
            drop(ctx);
            let t = g.value(o.logits);
            for i in 0..chunk.len() {
                out.push(t.index0(i));
            }
        }
        Ok(out)
    }

    /// Predicted class per sample.
    pub fn predict_classes(&mut self, data: &[JointExample], idx: &[usize]) -> Result<Vec<usize>> {
        Ok(self
            .predict_logits(data, idx)?
            .iter()
            .map(|t| {
                let d = t.data();
                (0..d.len()).fold(0, |b, i| if d[i] > d[b] { i } else { b })
            })
            .collect())
    }

    /// Binary masks (`logit > 0`) per sample.
    pub fn predict_masks(&mut self, data: &[JointExample], idx: &[usize]) -> Result<Vec<Image>> {
        let [h, w] = self.model.cfg.px_hw;
        self.predict_logits(data, idx)?
            .iter()
            .map(|t| Image::from_vec(h, w, t.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect()))
            .collect()
    }
}
