//! Finite-difference verification of analytic gradients (float64).

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Elements probed per group; larger groups are sampled with a fixed stride.
    pub max_checks_per_group: usize,
    /// Denominator floor for the relative error.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            max_checks_per_group: 64,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroupReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub groups: Vec<GroupReport>,
    /// Set when the function or its gradient produced a non-finite value or
    /// failed outright.
    pub failure: Option<String>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.failure.is_none() && self.max_rel_error() < tolerance
    }
}

fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the analytic gradient of the scalar `f(groups)` against central
/// differences for every group.
pub fn grad_check<F>(groups: &[(String, Tensor<f64>)], mut f: F, cfg: &GradCheckConfig) -> GradReport
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut values: Vec<Tensor<f64>> = groups.iter().map(|g| g.1.clone()).collect();
    let mut eval = |values: &[Tensor<f64>], with_grad: bool| -> Result<(f64, Option<Vec<Tensor<f64>>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|v| g.variable(v.clone())).collect();
        let out = f(&mut g, &vars)?;
        let grads = if with_grad { Some(collect(&g, out, &vars)?) } else { None };
        Ok((g.value(out).item(), grads))
    };
    fn collect(g: &Graph<f64>, out: Var, vars: &[Var]) -> Result<Vec<Tensor<f64>>> {
        let grads = g.backward(out)?;
        Ok(vars
            .iter()
            .map(|&v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v))))
            .collect())
    }

    let analytic = match eval(&values, true) {
        Ok((v, Some(grads))) if v.is_finite() => grads,
        Ok(_) => {
            return GradReport {
                groups: Vec::new(),
                failure: Some(String::from("non-finite function value")),
            }
        }
        Err(e) => {
            return GradReport {
                groups: Vec::new(),
                failure: Some(format!("{e}")),
            }
        }
    };

    let mut report = GradReport::default();
    for gi in 0..values.len() {
        let n = values[gi].len();
        let stride = n.div_ceil(cfg.max_checks_per_group.max(1)).max(1);
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for idx in (0..n).step_by(stride) {
            let orig = values[gi].data()[idx];
            values[gi].data_mut()[idx] = orig + cfg.eps;
            let plus = eval(&values, false).map(|r| r.0);
            values[gi].data_mut()[idx] = orig - cfg.eps;
            let minus = eval(&values, false).map(|r| r.0);
            values[gi].data_mut()[idx] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) if p.is_finite() && m.is_finite() => (p, m),
                (Err(e), _) | (_, Err(e)) => {
                    report.failure = Some(format!("{}: {e}", groups[gi].0));
                    return report;
                }
                _ => {
                    report.failure = Some(format!("{}: non-finite perturbed value", groups[gi].0));
                    return report;
                }
            };
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            worst = worst.max(rel_error(analytic[gi].data()[idx], numeric, cfg.floor));
            checked += 1;
        }
        report.groups.push(GroupReport {
            name: groups[gi].0.clone(),
            max_rel_error: worst,
            checked,
        });
    }
    report
}

/// Deterministic pseudo-random tensor in `[-1, 1)` for test inputs.
pub fn probe_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let data = (0..n)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}


/// Gradient check of a layer: every trainable tensor in `store` plus every
/// tensor in `inputs` is a group. The layer output is reduced with a fixed
/// random projection (or a plain sum when `plain_sum`). Normalization runs
/// in evaluation mode.
pub fn grad_check_layer<F>(
    store: &mut crate::nn::Store<f64>,
    inputs: &[(String, Tensor<f64>)],
    forward: F,
    plain_sum: bool,
    cfg: &GradCheckConfig,
) -> GradReport
where
    F: Fn(&mut crate::nn::Ctx<'_, '_, f64>, &[Var]) -> Result<Var>,
{
    use crate::nn::{Ctx, Mode};
    let params: Vec<_> = store.trainable().collect();
    let mut groups: Vec<(String, Tensor<f64>)> = params
        .iter()
        .map(|&id| (store.entries()[id.0].name.clone(), store.get(id).clone()))
        .collect();
    let np = groups.len();
    groups.extend(inputs.iter().cloned());
    let mut proj: Option<Tensor<f64>> = None;
    grad_check(
        &groups,
        |g, vars| {
            let mut ctx = Ctx::new(g, store, Mode::Eval);
            ctx.bind_trainable(&vars[..np]);
            let out = forward(&mut ctx, &vars[np..])?;
            if plain_sum {
                return g.sum(out);
            }
            let p = proj.get_or_insert_with(|| probe_tensor(g.shape(out), 0x5eed));
            g.dot_const(out, p.clone())
        },
        cfg,
    )
}
