//! Finite-difference checks of every model building block.
//!
//! Each check builds a small instance of a module in `f64`, perturbs its
//! parameters away from their initial values, and compares the analytic
//! gradient with respect to the module input and every trainable parameter
//! against central differences.

use std::time::Instant;

use sbcit_tensor::gradcheck::{check_gradients, GradCheckConfig, GradCheckReport, SplitMix64};
use sbcit_tensor::{CustomOp, ParameterStore, Pool2dOptions, PoolMode, Tape, Tensor, TensorError, Var};

use crate::config::{BackboneConfig, ModelConfig, ResidualStreamConfig, SpatialStreamConfig};
use crate::model::backbone::{cit_block_forward, lcmhsa_forward, lpu_forward, rrffn_forward, smoothing_boundary};
use crate::model::backbone::{AttentionSpec, Tokens};
use crate::model::head::{classify, spatial_attention};
use crate::model::layers::{conv, layer_norm, linear, ConvSpec};
use crate::model::streams::{residual_block_forward, BlockKind};
use crate::model::{model_forward, Ctx, Mode};
use crate::{Error, Result};

/// Modules run by [`run_suite`], in order.
pub const MODULES: &[&str] = &[
    "conv2d",
    "avg_pool",
    "max_pool",
    "relu",
    "linear",
    "layer_norm",
    "softmax_ce",
    "lpu",
    "lcmhsa",
    "rrffn",
    "cit_block",
    "smoothing_boundary",
    "residual_block_k",
    "residual_block_l",
    "spatial_attention",
    "classify",
    "model",
];

/// A deliberately wrong backward pass, available by name only, that shows
/// the checker reports failures.
pub const BROKEN_FIXTURE: &str = "broken_fixture";

#[derive(Clone, Debug)]
pub struct ModuleCheck {
    pub module: String,
    pub report: GradCheckReport,
    pub seconds: f64,
}

impl ModuleCheck {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

/// Settings used by the suite: a small step keeps the central difference
/// clear of ReLU and max-pool kinks.
pub fn suite_config() -> GradCheckConfig {
    GradCheckConfig {
        step: 1e-6,
        max_coords: 64,
        ..GradCheckConfig::default()
    }
}

fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = SplitMix64::new(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.next_signed() * scale)
}

/// Values spaced at least `0.01` apart, in shuffled order, so max pooling
/// has a unique winner that a tiny step cannot change.
fn distinct(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut rng = SplitMix64::new(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, (rng.next_u64() % (i as u64 + 1)) as usize);
    }
    Tensor::from_fn(shape.to_vec(), |i| order[i] as f64 * 0.01 - n as f64 * 0.005)
}

fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = SplitMix64::new(seed);
    Tensor::from_fn(shape.to_vec(), |_| {
        let v = rng.next_signed();
        v.signum() * (0.1 + v.abs())
    })
}

fn to_tensor_error(e: Error) -> TensorError {
    TensorError::Invalid {
        op: "gradsuite",
        reason: e.to_string(),
    }
}

/// Checks `build` with respect to its input and all trainable parameters
/// it creates. `select` narrows the parameters that are checked.
fn module_check<F>(
    input: Tensor<f64>,
    seed: u64,
    mode: Mode,
    cfg: &GradCheckConfig,
    select: impl Fn(&str) -> bool,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx<'_, f64>, Var) -> Result<Var>,
{
    let mut store = ParameterStore::<f64>::new();
    {
        let mut tape = Tape::new();
        let mut ctx = Ctx::building(&mut tape, &mut store, seed);
        let x = ctx.tape.constant(input.clone());
        build(&mut ctx, x)?;
    }
    // Move every trainable parameter off its initial value (zero biases,
    // unit scales, zero classifier) so each one carries a real gradient.
    let mut rng = SplitMix64::new(seed ^ 0x51_6E);
    let ids: Vec<_> = store.ids().collect();
    for &id in &ids {
        if store.get(id).trainable {
            let v = store.value(id);
            let moved = Tensor::from_fn(v.shape().to_vec(), |i| v.data()[i] + 0.3 * rng.next_signed());
            store.set_value(id, moved)?;
        }
    }
    let checked: Vec<(String, Tensor<f64>)> = store
        .iter()
        .filter(|(_, p)| p.trainable && select(&p.name))
        .map(|(_, p)| (p.name.clone(), p.value.clone()))
        .collect();
    let mut inputs = vec![input];
    inputs.extend(checked.iter().map(|(_, v)| v.clone()));
    let f = |tape: &mut Tape<f64>, vars: &[Var]| -> sbcit_tensor::Result<Var> {
        let mut ctx = Ctx::new(tape, &store, mode).with_dropout_seed(seed);
        for ((name, _), &v) in checked.iter().zip(&vars[1..]) {
            ctx = ctx.with_override(name.clone(), v);
        }
        build(&mut ctx, vars[0]).map_err(to_tensor_error)
    };
    Ok(check_gradients(f, &inputs, cfg)?)
}

fn all(_: &str) -> bool {
    true
}

fn tokens(var: Var, grid: (usize, usize), dim: usize) -> Tokens {
    Tokens { var, grid, dim }
}

const ATTN: AttentionSpec = AttentionSpec {
    dim: 8,
    heads: 2,
    window: 2,
    kv_stride: 2,
};

/// A 32×32 model small enough to check end to end in `f64`.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        in_channels: 1,
        num_classes: 3,
        input_size: 32,
        backbone: BackboneConfig {
            stem_channels: 4,
            stage_dims: [4, 8, 8, 8],
            stage_depths: [1, 1, 1, 1],
            stage_heads: [1, 2, 2, 2],
            window: 2,
            kv_stride: 2,
            expansion: 2,
        },
        residual: ResidualStreamConfig {
            block_channels: [4, 8, 8, 8],
        },
        spatial: SpatialStreamConfig {
            block_channels: [4, 4, 8, 8, 8],
        },
        attention_channels: 4,
        dropout: 0.3,
        stream_dropout: 0.0,
    }
}

/// Square `x ↦ x²` whose backward forgets the factor two.
struct BrokenSquare;

impl CustomOp<f64> for BrokenSquare {
    fn name(&self) -> &str {
        "broken_square"
    }

    fn backward(&self, inputs: &[&Tensor<f64>], _output: &Tensor<f64>, grad: &Tensor<f64>) -> Vec<Option<Tensor<f64>>> {
        let x = inputs[0];
        let g = Tensor::from_fn(x.shape().to_vec(), |i| grad.data()[i] * x.data()[i]);
        vec![Some(g)]
    }
}

fn run_check(name: &str, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let tape_check = |input: Tensor<f64>, f: &dyn Fn(&mut Tape<f64>, Var) -> sbcit_tensor::Result<Var>| {
        check_gradients(|t: &mut Tape<f64>, v: &[Var]| f(t, v[0]), &[input], cfg).map_err(Error::from)
    };
    match name {
        "conv2d" => module_check(random(&[2, 3, 6, 5], 1, 1.0), 11, Mode::Eval, cfg, all, |ctx, x| {
            conv(ctx, "conv", x, ConvSpec::new(3, 4, 3).stride(2))
        }),
        "avg_pool" => tape_check(random(&[2, 3, 7, 6], 2, 1.0), &|t, x| {
            t.pool2d(x, PoolMode::Avg, Pool2dOptions::new(3, 2, 1))
        }),
        "max_pool" => tape_check(distinct(&[2, 3, 6, 6], 3), &|t, x| {
            t.pool2d(x, PoolMode::Max, Pool2dOptions::new(2, 2, 0))
        }),
        "relu" => tape_check(away_from_zero(&[3, 7], 4), &|t, x| Ok(t.relu(x))),
        "linear" => module_check(random(&[4, 5], 5, 1.0), 12, Mode::Eval, cfg, all, |ctx, x| {
            linear(ctx, "fc", x, 5, 3)
        }),
        "layer_norm" => module_check(random(&[2, 3, 6], 6, 1.0), 13, Mode::Eval, cfg, all, |ctx, x| {
            layer_norm(ctx, "ln", x, 6)
        }),
        "softmax_ce" => {
            let weights = [0.5, 1.0, 2.0, 1.5, 0.8];
            tape_check(random(&[4, 5], 7, 2.0), &|t, x| {
                let soft = t.cross_entropy(x, &[0, 3, 2, 4], Some(&weights))?;
                let hard = t.cross_entropy(x, &[1, 1, 0, 2], None)?;
                t.add(soft, hard)
            })
        }
        "lpu" => module_check(random(&[2, 16, 8], 8, 1.0), 14, Mode::Eval, cfg, all, |ctx, x| {
            Ok(lpu_forward(ctx, "lpu", tokens(x, (4, 4), 8))?.var)
        }),
        "lcmhsa" => module_check(random(&[2, 16, 8], 9, 1.0), 15, Mode::Eval, cfg, all, |ctx, x| {
            Ok(lcmhsa_forward(ctx, "attn", tokens(x, (4, 4), 8), ATTN)?.var)
        }),
        "rrffn" => module_check(random(&[2, 16, 8], 10, 1.0), 16, Mode::Eval, cfg, all, |ctx, x| {
            Ok(rrffn_forward(ctx, "ffn", tokens(x, (4, 4), 8), 2)?.var)
        }),
        "cit_block" => module_check(random(&[2, 16, 8], 17, 1.0), 18, Mode::Eval, cfg, all, |ctx, x| {
            Ok(cit_block_forward(ctx, "block", tokens(x, (4, 4), 8), ATTN, 2)?.var)
        }),
        "smoothing_boundary" => module_check(distinct(&[2, 3, 5, 5], 19), 20, Mode::Eval, cfg, all, |ctx, x| {
            smoothing_boundary(ctx, "sb", x, 3)
        }),
        "residual_block_k" => module_check(random(&[2, 3, 6, 6], 21, 1.0), 22, Mode::Eval, cfg, all, |ctx, x| {
            residual_block_forward(ctx, "block", x, BlockKind::K, 3, 4, 2)
        }),
        "residual_block_l" => module_check(random(&[2, 4, 6, 6], 23, 1.0), 24, Mode::Eval, cfg, all, |ctx, x| {
            residual_block_forward(ctx, "block", x, BlockKind::L, 4, 4, 1)
        }),
        "spatial_attention" => module_check(random(&[2, 6, 4, 5], 25, 1.0), 26, Mode::Eval, cfg, all, |ctx, x| {
            spatial_attention(ctx, x, 4)
        }),
        "classify" => module_check(random(&[3, 6, 3, 3], 27, 1.0), 28, Mode::Train, cfg, all, |ctx, x| {
            Ok(classify(ctx, x, 4, 0.3)?.probabilities)
        }),
        "model" => {
            let mc = tiny_model_config();
            mc.validate()?;
            let e2e = GradCheckConfig {
                max_coords: 4,
                rel_tol: cfg.rel_tol.max(1e-3),
                ..cfg.clone()
            };
            module_check(random(&[2, 1, 32, 32], 29, 1.0), 30, Mode::Train, &e2e, all, |ctx, x| {
                Ok(model_forward(ctx, &mc, x)?.head.logits)
            })
        }
        BROKEN_FIXTURE => tape_check(away_from_zero(&[2, 3], 31), &|t, x| {
            let v = t.value(x).clone();
            let out = Tensor::from_fn(v.shape().to_vec(), |i| v.data()[i] * v.data()[i]);
            Ok(t.custom(&[x], out, Box::new(BrokenSquare)))
        }),
        other => Err(Error::Config(format!(
            "unknown gradient-check module `{other}`; expected one of {} or {BROKEN_FIXTURE}",
            MODULES.join(", ")
        ))),
    }
}

/// Runs the check for one named module.
pub fn run_module(name: &str, cfg: &GradCheckConfig) -> Result<ModuleCheck> {
    let start = Instant::now();
    let report = run_check(name, cfg)?;
    Ok(ModuleCheck {
        module: name.to_string(),
        report,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs every module in [`MODULES`].
pub fn run_suite(cfg: &GradCheckConfig) -> Result<Vec<ModuleCheck>> {
    MODULES.iter().map(|m| run_module(m, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broken_fixture_fails_and_is_not_in_the_suite() {
        let r = run_module(BROKEN_FIXTURE, &suite_config()).unwrap();
        assert!(!r.passed());
        assert!(r.report.max_rel_error > 0.1);
        assert!(!MODULES.contains(&BROKEN_FIXTURE));
    }

    #[test]
    fn unknown_module_is_an_error() {
        assert!(run_module("nope", &suite_config()).is_err());
    }

    #[test]
    fn tiny_model_is_valid() {
        tiny_model_config().validate().unwrap();
    }
}
