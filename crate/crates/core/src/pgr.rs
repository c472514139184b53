//! Progressive guided reconstruction: a U-shaped encoder/decoder that maps a
//! panoramic image to an unfolded volume, with depth carried as channels and
//! weighted SSE guidance on intermediate stages.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{param_grads, BatchNorm, Conv, ConvBlock, Ctx, Dims, HbBlock, HbConfig, Mode, Store};
use crate::optim::{batch_indices, Adam, LrSchedule};
use crate::tensor::Tensor;
use crate::volume::{resample_3d, AxisOrder, Image, Volume};
use crate::Real;

/// Number of guided stages: four encoder blocks then four decoder blocks.
pub const STAGES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PgrConfig {
    /// `(H, W)` of the input image and of the reconstruction.
    pub input_hw: [usize; 2],
    /// Depth of the reconstructed volume; equals the decoder channel count.
    pub depth: usize,
    pub stem: usize,
    pub encoder: [usize; 4],
    pub bottleneck: usize,
    pub block: usize,
    pub reduction: usize,
}

impl PgrConfig {
    pub fn full() -> Self {
        PgrConfig {
            input_hw: [128, 256],
            depth: 128,
            stem: 16,
            encoder: [16, 32, 64, 128],
            bottleneck: 256,
            block: 8,
            reduction: 4,
        }
    }

    /// Every dimension and channel count divided by four.
    pub fn desk() -> Self {
        PgrConfig {
            input_hw: [32, 64],
            depth: 32,
            stem: 4,
            encoder: [4, 8, 16, 32],
            bottleneck: 64,
            block: 8,
            reduction: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_hw.iter().any(|&d| d < 24) {
            return Err(Error::config("input_hw", "need at least 24 pixels per axis for three poolings"));
        }
        if self.depth == 0 || self.depth % 2 != 0 {
            return Err(Error::config("depth", "must be positive and even"));
        }
        if self.stem == 0 || self.encoder.contains(&0) || self.bottleneck == 0 {
            return Err(Error::config("encoder", "channel counts must be positive"));
        }
        Ok(())
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        if stage < 4 {
            self.encoder[stage]
        } else {
            self.depth
        }
    }

    /// Spatial size of stage `i`; pooling rounds odd sizes up.
    pub fn stage_hw(&self, stage: usize) -> [usize; 2] {
        let level = if stage < 4 { stage } else { STAGES - 1 - stage };
        self.input_hw.map(|mut d| {
            for _ in 0..level {
                d = d.div_ceil(2);
            }
            d
        })
    }

    pub fn guidable(&self, stage: usize) -> bool {
        stage < STAGES && self.stage_channels(stage) == self.depth
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaSchedule {
    /// `alpha_i = 2^(n-1-i)`, zero for the first three stages.
    Paper,
    /// Mirror image: weight grows toward the output.
    Reversed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSchedule {
    pub alphas: Vec<f64>,
}

impl WeightSchedule {
    pub fn new(kind: AlphaSchedule) -> Self {
        let alphas = (0..STAGES)
            .map(|i| {
                if i <= 2 {
                    0.0
                } else {
                    match kind {
                        AlphaSchedule::Paper => libm::ldexp(1.0, (STAGES - 1 - i) as i32),
                        AlphaSchedule::Reversed => libm::ldexp(1.0, (i - 3) as i32),
                    }
                }
            })
            .collect();
        WeightSchedule { alphas }
    }

    pub fn one_hot(stage: usize, alpha: f64) -> Self {
        let mut alphas = vec![0.0; STAGES];
        alphas[stage] = alpha;
        WeightSchedule { alphas }
    }

    pub fn validate(&self, cfg: &PgrConfig) -> Result<()> {
        if self.alphas.len() != STAGES {
            return Err(Error::config("alphas", format!("need {STAGES} weights, got {}", self.alphas.len())));
        }
        for (i, &a) in self.alphas.iter().enumerate() {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(Error::config("alphas", format!("alpha_{i} = {a} must be finite and non-negative")));
            }
            if a > 0.0 && !cfg.guidable(i) {
                return Err(Error::config(
                    "alphas",
                    format!("stage {i} has {} channels, cannot be guided", cfg.stage_channels(i)),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PgrModel {
    pub cfg: PgrConfig,
    stem: Conv,
    encoder: Vec<ConvBlock>,
    bottleneck: Conv,
    bottleneck_bn: BatchNorm,
    decoder: Vec<HbBlock>,
}

/// Outputs of all eight stages; the last is the reconstruction `[N, D, H, W]`.
#[derive(Debug, Clone)]
pub struct PgrOutputs {
    pub stages: Vec<Var>,
}

impl PgrOutputs {
    pub fn reconstruction(&self) -> Var {
        self.stages[STAGES - 1]
    }
}

impl PgrModel {
    pub fn new<T: Real>(store: &mut Store<T>, cfg: PgrConfig) -> Result<Self> {
        cfg.validate()?;
        let stem = Conv::new(store, "stem", 1, cfg.stem, 3, Dims::Two);
        let mut cin = cfg.stem;
        let mut encoder = Vec::new();
        for (i, &c) in cfg.encoder.iter().enumerate() {
            encoder.push(ConvBlock::new(store, &format!("enc{i}"), cin, c, Dims::Two));
            cin = c;
        }
        let bottleneck = Conv::new(store, "bottleneck", cin, cfg.bottleneck, 3, Dims::Two);
        let bottleneck_bn = BatchNorm::new(store, "bottleneck.bn", cfg.bottleneck);
        let hb = HbConfig {
            block: cfg.block,
            reduction: cfg.reduction,
            ..HbConfig::new(cfg.depth)
        };
        let mut decoder = Vec::new();
        let mut cin = cfg.bottleneck;
        for i in 0..4 {
            let skip = cfg.encoder[3 - i];
            decoder.push(HbBlock::new(store, &format!("dec{}", i + 4), cin, skip, hb)?);
            cin = cfg.depth;
        }
        Ok(PgrModel {
            cfg,
            stem,
            encoder,
            bottleneck,
            bottleneck_bn,
            decoder,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, '_, T>, x: Var) -> Result<PgrOutputs> {
        let s = ctx.g.shape(x).to_vec();
        let [h, w] = self.cfg.input_hw;
        if s.len() != 4 || s[1] != 1 || s[2] != h || s[3] != w {
            return Err(Error::shape("pgr_forward", &[s.first().copied().unwrap_or(0), 1, h, w], &s));
        }
        let mut stages = Vec::with_capacity(STAGES);
        let mut cur = self.stem.forward(ctx, x)?;
        for (i, block) in self.encoder.iter().enumerate() {
            if i > 0 {
                cur = ctx.g.maxpool2d(cur)?;
            }
            cur = block.forward(ctx, cur)?;
            stages.push(cur);
        }
        let b = self.bottleneck.forward(ctx, cur)?;
        let b = self.bottleneck_bn.forward(ctx, b)?;
        cur = ctx.g.relu(b)?;
        for (i, block) in self.decoder.iter().enumerate() {
            let skip = stages[3 - i];
            if i > 0 {
                let sh = ctx.g.shape(skip).to_vec();
                cur = ctx.g.upsample2d_to(cur, sh[2], sh[3])?;
            }
            cur = block.forward(ctx, cur, skip)?;
            stages.push(cur);
        }
        Ok(PgrOutputs { stages })
    }

    /// Disables the gated MLP and channel attention in every decoder block.
    pub fn set_ablation(&mut self, ablate: bool) {
        self.decoder.iter_mut().for_each(|b| b.set_ablation(ablate));
    }
}

/// Ground truth `(H, W, D)` reordered to `(D, H, W)` and resized in H and W
/// to the spatial size of `stage`.
pub fn scale_label(gt: &Volume, stage: usize, cfg: &PgrConfig) -> Result<Tensor<f32>> {
    if stage >= STAGES || !cfg.guidable(stage) {
        return Err(Error::UnsupportedStage {
            stage,
            reason: format!(
                "{} channels, label depth {}",
                if stage < STAGES { cfg.stage_channels(stage) } else { 0 },
                cfg.depth
            ),
        });
    }
    let [h, w] = cfg.input_hw;
    let d = cfg.depth;
    if gt.axes != AxisOrder::Hwd || gt.dims != [h, w, d] {
        return Err(Error::shape("scale_label", &[h, w, d], &gt.dims));
    }
    let dhw = hwd_to_dhw(&gt.data, [h, w, d]);
    let [sh, sw] = cfg.stage_hw(stage);
    let data = resample_3d(&dhw, [d, h, w], [d, sh, sw]);
    Tensor::from_vec(&[d, sh, sw], data)
}

pub fn hwd_to_dhw(data: &[f32], [h, w, d]: [usize; 3]) -> Vec<f32> {
    let mut out = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            for z in 0..d {
                out[(z * h + y) * w + x] = data[(y * w + x) * d + z];
            }
        }
    }
    out
}

pub fn dhw_to_hwd(data: &[f32], [d, h, w]: [usize; 3]) -> Vec<f32> {
    let mut out = vec![0.0; data.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                out[(y * w + x) * d + z] = data[(z * h + y) * w + x];
            }
        }
    }
    out
}

/// Total and per-stage terms of the progressive loss.
#[derive(Debug, Clone)]
pub struct ProgressiveLoss {
    pub total: Var,
    /// Unweighted SSE per stage; `None` where the weight is zero.
    pub per_stage: Vec<Option<Var>>,
}

/// `sum_i alpha_i * sse(f_i, Y_i)`; stages with zero weight are skipped and
/// need no label.
pub fn progressive_loss<T: Real>(
    g: &mut Graph<T>,
    stages: &[Var],
    labels: &[Option<Var>],
    schedule: &WeightSchedule,
) -> Result<ProgressiveLoss> {
    if schedule.alphas.len() != stages.len() || labels.len() != stages.len() {
        return Err(Error::config(
            "alphas",
            format!("{} weights, {} stages, {} labels", schedule.alphas.len(), stages.len(), labels.len()),
        ));
    }
    let mut terms = Vec::new();
    let mut per_stage = vec![None; stages.len()];
    for (i, (&a, &f)) in schedule.alphas.iter().zip(stages).enumerate() {
        if a == 0.0 {
            continue;
        }
        let y = labels[i].ok_or_else(|| Error::config("alphas", format!("stage {i} is weighted but has no label")))?;
        if g.shape(f) != g.shape(y) {
            return Err(if g.shape(f).get(1) != g.shape(y).get(1) {
                Error::config("alphas", format!("stage {i} channel count does not match the label depth"))
            } else {
                Error::shape("progressive_loss", g.shape(y), g.shape(f))
            });
        }
        let l = g.sse(f, y)?;
        per_stage[i] = Some(l);
        terms.push((l, T::of(a)));
    }
    let total = if terms.is_empty() {
        g.constant(Tensor::scalar(T::zero()))
    } else {
        g.combine(&terms)?
    };
    Ok(ProgressiveLoss { total, per_stage })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgrTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub alpha: AlphaSchedule,
    pub seed: u64,
}

impl Default for PgrTrainConfig {
    fn default() -> Self {
        PgrTrainConfig {
            steps: 20000,
            batch_size: 8,
            schedule: LrSchedule::reconstruction(),
            alpha: AlphaSchedule::Paper,
            seed: 0,
        }
    }
}

/// One training pair with its labels precomputed for the weighted stages.
#[derive(Debug, Clone)]
pub struct ReconExample {
    /// `[1, H, W]`.
    pub px: Tensor<f32>,
    pub labels: Vec<Option<Tensor<f32>>>,
}

impl ReconExample {
    pub fn new(px: &Image, gt: &Volume, cfg: &PgrConfig, weights: &WeightSchedule) -> Result<Self> {
        let [h, w] = cfg.input_hw;
        if (px.h, px.w) != (h, w) {
            return Err(Error::shape("recon_example", &[h, w], &[px.h, px.w]));
        }
        let labels = (0..STAGES)
            .map(|i| {
                if weights.alphas.get(i).copied().unwrap_or(0.0) > 0.0 {
                    scale_label(gt, i, cfg).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ReconExample {
            px: Tensor::from_vec(&[1, h, w], px.data.clone())?,
            labels,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub per_stage: Vec<Option<f64>>,
    pub batch: Vec<usize>,
}

/// Owns the model, its parameters and optimizer state.
#[derive(Debug, Clone)]
pub struct PgrTrainer {
    pub model: PgrModel,
    pub store: Store<f32>,
    pub opt: Adam<f32>,
    pub cfg: PgrTrainConfig,
    pub weights: WeightSchedule,
    /// Updates applied so far.
    pub step: u64,
}

impl PgrTrainer {
    pub fn new(model_cfg: PgrConfig, cfg: PgrTrainConfig) -> Result<Self> {
        if cfg.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        let mut store = Store::new(cfg.seed);
        let model = PgrModel::new(&mut store, model_cfg)?;
        let weights = WeightSchedule::new(cfg.alpha);
        weights.validate(&model_cfg)?;
        let opt = Adam::new(&store);
        Ok(PgrTrainer {
            model,
            store,
            opt,
            cfg,
            weights,
            step: 0,
        })
    }

    pub fn train_step(&mut self, data: &[ReconExample]) -> Result<StepLog> {
        if data.is_empty() {
            return Err(Error::config("manifest", "no training samples"));
        }
        let batch = batch_indices(self.cfg.seed, self.step, self.cfg.batch_size, data.len());
        let step = self.step;
        let lr = self.cfg.schedule.lr(step);
        let diverged = |e: Error| Error::Diverged {
            step,
            batch: batch.clone(),
            cause: format!("{e}"),
        };
        let mut g = Graph::new();
        let x = Tensor::stack(&batch.iter().map(|&i| data[i].px.clone()).collect::<Vec<_>>())?;
        let labels: Vec<Option<Var>> = (0..STAGES)
            .map(|s| {
                let parts: Option<Vec<Tensor<f32>>> = batch.iter().map(|&i| data[i].labels[s].clone()).collect();
                parts.map(|p| Tensor::stack(&p).map(|t| g.constant(t))).transpose()
            })
            .collect::<Result<_>>()?;
        let xv = g.constant(x);
        let mut ctx = Ctx::new(&mut g, &mut self.store, Mode::Train);
        let out = self.model.forward(&mut ctx, xv).map_err(diverged)?;
        let bound = ctx.bound_params();
        drop(ctx);
        let loss = progressive_loss(&mut g, &out.stages, &labels, &self.weights).map_err(diverged)?;
        let mut grads = g.backward(loss.total).map_err(diverged)?;
        let pg = param_grads(&bound, &mut grads);
        self.opt.step(&mut self.store, &pg, lr)?;
        self.step += 1;
        Ok(StepLog {
            step,
            lr,
            total: g.value(loss.total).item() as f64,
            per_stage: loss.per_stage.iter().map(|v| v.map(|v| g.value(v).item() as f64)).collect(),
            batch,
        })
    }

    /// Eval-mode reconstruction as an `(H, W, D)` volume, clamped to [0,1].
    pub fn predict(&mut self, px: &Image) -> Result<Volume> {
        predict_volume(&self.model, &mut self.store, px)
    }
}

/// Eval-mode reconstruction of one image, clamped to [0,1].
pub fn predict_volume(model: &PgrModel, store: &mut Store<f32>, px: &Image) -> Result<Volume> {
    let [h, w] = model.cfg.input_hw;
    let d = model.cfg.depth;
    if (px.h, px.w) != (h, w) {
        return Err(Error::shape("pgr_forward", &[h, w], &[px.h, px.w]));
    }
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(&[1, 1, h, w], px.data.clone())?);
    let mut ctx = Ctx::new(&mut g, store, Mode::Eval);
    let out = model.forward(&mut ctx, x)?;
    drop(ctx);
    let rec: Vec<f32> = g.value(out.reconstruction()).data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let data = dhw_to_hwd(&rec, [d, h, w]);
    Volume::from_vec([h, w, d], [1.0; 3], AxisOrder::Hwd, data)
}
