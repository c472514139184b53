use alloc::format;

use super::store::{Ctx, Init, Mode, ParamId, Store};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::real::Real;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dims {
    Two,
    Three,
}

/// Same-padded convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv {
    w: ParamId,
    b: ParamId,
    dims: Dims,
    pub cin: usize,
    pub cout: usize,
}

impl Conv {
    pub fn new<T: Real>(store: &mut Store<T>, name: &str, cin: usize, cout: usize, k: usize, dims: Dims) -> Self {
        let (shape, fan_in) = match dims {
            Dims::Two => (alloc::vec![cout, cin, k, k], cin * k * k),
            Dims::Three => (alloc::vec![cout, cin, k, k, k], cin * k * k * k),
        };
        let w = store.param(format!("{name}.w"), &shape, Init::HeNormal { fan_in });
        let b = store.param(format!("{name}.b"), &[cout], Init::Zeros);
        Conv { w, b, dims, cin, cout }
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, '_, T>, x: Var) -> Result<Var> {
        let c = ctx.g.shape(x).get(1).copied().unwrap_or(0);
        if c != self.cin {
            return Err(Error::shape("conv", &[self.cin], &[c]));
        }
        let (w, b) = (ctx.p(self.w), ctx.p(self.b));
        match self.dims {
            Dims::Two => ctx.g.conv2d(x, w, b),
            Dims::Three => ctx.g.conv3d(x, w, b),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut Store<T>, name: &str, c: usize) -> Self {
        BatchNorm {
            gamma: store.param(format!("{name}.gamma"), &[c], Init::Const(1.0)),
            beta: store.param(format!("{name}.beta"), &[c], Init::Zeros),
            mean: store.buffer(format!("{name}.running_mean"), &[c], Init::Zeros),
            var: store.buffer(format!("{name}.running_var"), &[c], Init::Const(1.0)),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, '_, T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (ctx.p(self.gamma), ctx.p(self.beta));
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = ctx.g.batch_norm_train(x, gamma, beta, BN_EPS)?;
                let m = T::of(BN_MOMENTUM);
                let store = ctx.store_mut();
                for (r, &s) in store.get_mut(self.mean).data_mut().iter_mut().zip(&stats.mean) {
                    *r = (T::one() - m) * *r + m * s;
                }
                for (r, &s) in store.get_mut(self.var).data_mut().iter_mut().zip(&stats.var) {
                    *r = (T::one() - m) * *r + m * s;
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = ctx.store().get(self.mean).data().to_vec();
                let var = ctx.store().get(self.var).data().to_vec();
                ctx.g.batch_norm_eval(x, gamma, beta, &mean, &var, BN_EPS)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
    pub fin: usize,
    pub fout: usize,
}

impl Linear {
    pub fn new<T: Real>(store: &mut Store<T>, name: &str, fin: usize, fout: usize) -> Self {
        Linear {
            w: store.param(format!("{name}.w"), &[fout, fin], Init::HeNormal { fan_in: fin }),
            b: store.param(format!("{name}.b"), &[fout], Init::Zeros),
            fin,
            fout,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, '_, T>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.p(self.w), ctx.p(self.b));
        ctx.g.linear(x, w, b)
    }
}

/// conv3x3 -> BN -> ReLU -> conv3x3 -> BN -> ReLU, spatial extent preserved.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    conv1: Conv,
    bn1: BatchNorm,
    conv2: Conv,
    bn2: BatchNorm,
}

impl ConvBlock {
    pub fn new<T: Real>(store: &mut Store<T>, name: &str, cin: usize, cout: usize, dims: Dims) -> Self {
        ConvBlock {
            conv1: Conv::new(store, &format!("{name}.conv1"), cin, cout, 3, dims),
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), cout),
            conv2: Conv::new(store, &format!("{name}.conv2"), cout, cout, 3, dims),
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), cout),
        }
    }

    pub fn cout(&self) -> usize {
        self.conv2.cout
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, '_, T>, x: Var) -> Result<Var> {
        let spatial = &ctx.g.shape(x)[2..];
        if spatial.iter().any(|&d| d < 3) {
            return Err(Error::shape("conv_block", &[3, 3], spatial));
        }
        let h = self.conv1.forward(ctx, x)?;
        let h = self.bn1.forward(ctx, h)?;
        let h = ctx.g.relu(h)?;
        let h = self.conv2.forward(ctx, h)?;
        let h = self.bn2.forward(ctx, h)?;
        ctx.g.relu(h)
    }
}
