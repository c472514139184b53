//! Decoder building blocks: multi-axis gated MLP, channel attention and the
//! hybrid MLP-CNN block that combines them with convolutions.

use alloc::format;

use super::layers::{BatchNorm, Conv, Dims, Linear};
use super::store::{Ctx, Init, ParamId, Store};
use crate::autodiff::{MixAxis, Var};
use crate::error::{Error, Result};
use crate::real::Real;

pub const DEFAULT_BLOCK_SIZE: usize = 8;
pub const DEFAULT_REDUCTION: usize = 4;

/// Residual multi-axis gated MLP.
///
/// `h = gelu(in_proj(x))` has `2C` channels: the first `C` feed the local
/// (in-window) branch, the last `C` the global (grid) branch. Each branch
/// splits its `C` channels into `(u, v)` and emits `u * mix(v)`; the two
/// `C/2`-channel results are summed, projected back to `C` and added to `x`.
#[derive(Debug, Clone)]
pub struct GatedMlp {
    in_proj: Conv,
    local_w: ParamId,
    local_b: ParamId,
    grid_w: ParamId,
    grid_b: ParamId,
    out_proj: Conv,
    channels: usize,
    block: usize,
}

impl GatedMlp {
    pub fn new<T: Real>(
        store: &mut Store<T>,
        name: &str,
        channels: usize,
        block: usize,
        zero_out_proj: bool,
    ) -> Result<Self> {
        if channels % 2 == 1 || channels == 0 {
            return Err(Error::config(
                "channels",
                format!("gated MLP splits channels in half; got {channels}"),
            ));
        }
        if block == 0 {
            return Err(Error::config("block_size", "must be positive"));
        }
        let p = block * block;
        let in_proj = Conv::new(store, &format!("{name}.in_proj"), channels, 2 * channels, 1, Dims::Two);
        let local_w = store.param(format!("{name}.local.w"), &[p, p], Init::HeNormal { fan_in: p });
        let local_b = store.param(format!("{name}.local.b"), &[p], Init::Const(1.0));
        let grid_w = store.param(format!("{name}.grid.w"), &[p, p], Init::HeNormal { fan_in: p });
        let grid_b = store.param(format!("{name}.grid.b"), &[p], Init::Const(1.0));
        let out_proj = Conv::new(store, &format!("{name}.out_proj"), channels / 2, channels, 1, Dims::Two);
        if zero_out_proj {
            store.get_mut(out_proj.weight()).data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        Ok(GatedMlp {
            in_proj,
            local_w,
            local_b,
            grid_w,
            grid_b,
            out_proj,
            channels,
            block,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, '_, T>, x: Var) -> Result<Var> {
        let c = self.channels;
        let h = self.in_proj.forward(ctx, x)?;
        let h = ctx.g.gelu(h)?;
        let branch = |ctx: &mut Ctx<'_, '_, T>, offset: usize, w: ParamId, b: ParamId, axis: MixAxis| {
            let u = ctx.g.narrow(h, 1, offset, c / 2)?;
            let v = ctx.g.narrow(h, 1, offset + c / 2, c / 2)?;
            let (w, b) = (ctx.p(w), ctx.p(b));
            let mixed = ctx.g.spatial_mix(v, w, b, axis)?;
            ctx.g.mul(u, mixed)
        };
        let local = branch(ctx, 0, self.local_w, self.local_b, MixAxis::Block(self.block))?;
        let global = branch(ctx, c, self.grid_w, self.grid_b, MixAxis::Grid(self.block))?;
        let sum = ctx.g.add(local, global)?;
        let out = self.out_proj.forward(ctx, sum)?;
        ctx.g.add(out, x)
    }
}

/// Squeeze-excitation style channel reweighting:
/// `x * sigmoid(W2 relu(W1 avgpool(x)))`.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    fc1: Linear,
    fc2: Linear,
}

impl ChannelAttention {
    pub fn new<T: Real>(store: &mut Store<T>, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || reduction > channels {
            return Err(Error::config(
                "reduction",
                format!("reduction {reduction} must be in [1, {channels}]"),
            ));
        }
        if channels % reduction != 0 {
            return Err(Error::config(
                "reduction",
                format!("{channels} channels not divisible by reduction {reduction}"),
            ));
        }
        Ok(ChannelAttention {
            fc1: Linear::new(store, &format!("{name}.fc1"), channels, channels / reduction),
            fc2: Linear::new(store, &format!("{name}.fc2"), channels / reduction, channels),
        })
    }

    /// Per-channel scale `s[N,C]`.
    pub fn scale<T: Real>(&self, ctx: &mut Ctx<'_, '_, T>, x: Var) -> Result<Var> {
        let pooled = ctx.g.global_avg_pool(x)?;
        let h = self.fc1.forward(ctx, pooled)?;
        let h = ctx.g.relu(h)?;
        let h = self.fc2.forward(ctx, h)?;
        ctx.g.sigmoid(h)
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, '_, T>, x: Var) -> Result<Var> {
        let s = self.scale(ctx, x)?;
        ctx.g.mul_channel(x, s)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HbConfig {
    pub channels: usize,
    pub block: usize,
    pub reduction: usize,
    /// Replace the gated MLP and channel attention with identities.
    pub ablate_attention: bool,
}

impl HbConfig {
    pub fn new(channels: usize) -> Self {
        HbConfig {
            channels,
            block: DEFAULT_BLOCK_SIZE,
            reduction: DEFAULT_REDUCTION,
            ablate_attention: false,
        }
    }
}

/// Hybrid MLP-CNN decoder block.
///
/// `f = relu(bn(conv3x3(concat(x, skip))))`, then `a = ca(gmlp(f))` and the
/// output `conv3x3(a) + f`. The output layer has no activation.
#[derive(Debug, Clone)]
pub struct HbBlock {
    fuse: Conv,
    bn: BatchNorm,
    mlp: GatedMlp,
    attn: ChannelAttention,
    conv2: Conv,
    cfg: HbConfig,
    pub cin: usize,
    pub cskip: usize,
}

impl HbBlock {
    pub fn new<T: Real>(store: &mut Store<T>, name: &str, cin: usize, cskip: usize, cfg: HbConfig) -> Result<Self> {
        let c = cfg.channels;
        Ok(HbBlock {
            fuse: Conv::new(store, &format!("{name}.fuse"), cin + cskip, c, 3, Dims::Two),
            bn: BatchNorm::new(store, &format!("{name}.bn"), c),
            mlp: GatedMlp::new(store, &format!("{name}.gmlp"), c, cfg.block, false)?,
            attn: ChannelAttention::new(store, &format!("{name}.ca"), c, cfg.reduction)?,
            conv2: Conv::new(store, &format!("{name}.conv2"), c, c, 3, Dims::Two),
            cfg,
            cin,
            cskip,
        })
    }

    pub fn set_ablation(&mut self, ablate: bool) {
        self.cfg.ablate_attention = ablate;
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, '_, T>, x: Var, skip: Var) -> Result<Var> {
        let (xs, ss) = (ctx.g.shape(x).to_vec(), ctx.g.shape(skip).to_vec());
        if xs.len() != 4 || ss.len() != 4 || xs[0] != ss[0] || xs[2..] != ss[2..] {
            return Err(Error::shape("hb_block", &xs, &ss));
        }
        let cat = ctx.g.concat(&[x, skip], 1)?;
        let f = self.fuse.forward(ctx, cat)?;
        let f = self.bn.forward(ctx, f)?;
        let f = ctx.g.relu(f)?;
        let a = if self.cfg.ablate_attention {
            f
        } else {
            let m = self.mlp.forward(ctx, f)?;
            self.attn.forward(ctx, m)?
        };
        let out = self.conv2.forward(ctx, a)?;
        ctx.g.add(out, f)
    }
}
