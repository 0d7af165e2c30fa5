//! The CE-RS-SBCIT network.
//!
//! Every layer is a function of a [`Ctx`], which supplies parameters by name
//! and records operations on a tape. Building a model runs one forward pass
//! with a context that creates each parameter on first use, so the parameter
//! set is defined by the forward code alone.

pub mod backbone;
mod ctx;
pub mod head;
pub mod layers;
pub mod streams;

use std::collections::BTreeMap;
use std::fmt;

use sbcit_tensor::{BatchNormStats, Element, FlushSubnormals, ParameterStore, Tape, Tensor, Var};
use serde::Serialize;

pub use ctx::{Ctx, Init, Mode};
pub use head::HeadOutput;

use crate::config::ModelConfig;
use crate::{Error, Result};

/// Momentum of the running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// Intermediate maps of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub stem: Var,
    pub stages: Vec<Var>,
    pub residual: Var,
    pub spatial: Var,
    pub enhanced: Var,
    pub attended: Var,
    pub head: HeadOutput,
}

/// Full forward pass: stem, the three streams, fusion, gating and head.
pub fn model_forward<T: Element>(ctx: &mut Ctx<'_, T>, cfg: &ModelConfig, images: Var) -> Result<ForwardVars> {
    let s = ctx.tape.shape(images).to_vec();
    if s.len() != 4 || s[1] != cfg.in_channels || s[2] != cfg.input_size || s[3] != cfg.input_size {
        return Err(Error::Config(format!(
            "expected images [N, {}, {}, {}], got {s:?}",
            cfg.in_channels, cfg.input_size, cfg.input_size
        )));
    }
    ctx.tape.set_scope("stem");
    let stem = backbone::stem_forward(ctx, images, cfg.in_channels, cfg.backbone.stem_channels)?;
    let stages = backbone::backbone_forward(ctx, &cfg.backbone, stem)?;
    ctx.tape.set_scope("residual");
    let residual = streams::residual_stream_forward(ctx, &cfg.residual, cfg.stream_dropout, stem)?;
    ctx.tape.set_scope("spatial");
    let spatial = streams::spatial_stream_forward(
        ctx,
        &cfg.spatial,
        cfg.stream_width(),
        images,
        streams::spatial_pool_mode,
    )?;
    let x_sbcit = stages[3];
    streams::check_alignment(
        cfg,
        [
            ("residual", ctx.tape.shape(residual)),
            ("spatial", ctx.tape.shape(spatial)),
            ("backbone", ctx.tape.shape(x_sbcit)),
        ],
    )?;
    ctx.tape.set_scope("fusion");
    let enhanced = head::channel_enhance(ctx, residual, spatial, x_sbcit)?;
    let attended = head::spatial_attention(ctx, enhanced, cfg.attention_channels)?;
    ctx.tape.set_scope("classifier");
    let head = head::classify(ctx, attended, cfg.num_classes, cfg.dropout)?;
    Ok(ForwardVars {
        stem,
        stages,
        residual,
        spatial,
        enhanced,
        attended,
        head,
    })
}

/// Evaluated outputs for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Tensor<f32>,
    pub probabilities: Tensor<f32>,
    pub penultimate: Tensor<f32>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterStore<f32>,
}

impl Model {
    /// Builds a model with freshly initialized parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = build_store(&config, seed)?;
        Ok(Model { config, params })
    }

    /// Adopts the values of `params` after checking they match `config`.
    ///
    /// Entries are reordered to the configured order and take their
    /// trainable flags from it.
    pub fn from_params(config: ModelConfig, params: ParameterStore<f32>) -> Result<Self> {
        let mut store = build_store::<f32>(&config, 0)?;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.get(id).name.clone();
            let src = params.id(&name).ok_or_else(|| Error::Checkpoint {
                name: name.clone(),
                reason: "missing from the checkpoint".into(),
            })?;
            let value = params.value(src);
            if value.shape() != store.value(id).shape() {
                return Err(Error::Checkpoint {
                    reason: format!(
                        "shape {:?} does not match the configured {:?}",
                        value.shape(),
                        store.value(id).shape()
                    ),
                    name,
                });
            }
            store.set_value(id, value.clone())?;
        }
        if let Some((_, extra)) = params.iter().find(|(_, p)| store.id(&p.name).is_none()) {
            return Err(Error::Checkpoint {
                name: extra.name.clone(),
                reason: "not part of the configured model".into(),
            });
        }
        Ok(Model { config, params: store })
    }

    /// Eval-mode forward pass over `images` in chunks of `batch`.
    pub fn predict(&self, images: &Tensor<f32>, batch: usize) -> Result<Prediction> {
        let _flush = FlushSubnormals::enable();
        let n = images.shape()[0];
        let mut parts: [Vec<Tensor<f32>>; 3] = Default::default();
        let mut start = 0;
        while start < n {
            let len = batch.max(1).min(n - start);
            let chunk = images.narrow(0, start, len)?;
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, &self.params, Mode::Eval).frozen();
            let x = ctx.tape.constant(chunk);
            let out = model_forward(&mut ctx, &self.config, x)?.head;
            for (dst, v) in parts.iter_mut().zip([out.logits, out.probabilities, out.penultimate]) {
                dst.push(tape.value(v).clone());
            }
            start += len;
        }
        let [l, p, f] = parts.map(|t| concat_rows(&t));
        Ok(Prediction {
            logits: l?,
            probabilities: p?,
            penultimate: f?,
        })
    }

    /// Folds batch statistics from a training pass into the running
    /// estimates with momentum [`BN_MOMENTUM`] and unbiased variance.
    pub fn apply_bn_updates(&mut self, updates: &[(String, BatchNormStats)]) -> Result<()> {
        for (prefix, stats) in updates {
            let n = stats.count as f64;
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            for (suffix, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
                let name = format!("{prefix}.{suffix}");
                let id = self.params.id(&name).ok_or_else(|| Error::Checkpoint {
                    name: name.clone(),
                    reason: "missing running statistic".into(),
                })?;
                let factor = if suffix == "running_var" { unbias } else { 1.0 };
                let current = self.params.value(id);
                let updated: Vec<f32> = current
                    .data()
                    .iter()
                    .zip(batch)
                    .map(|(&r, &b)| ((1.0 - BN_MOMENTUM) * r as f64 + BN_MOMENTUM * b * factor) as f32)
                    .collect();
                let t = Tensor::new(current.shape().to_vec(), updated)?;
                self.params.set_value(id, t)?;
            }
        }
        Ok(())
    }

    pub fn describe(&self) -> Result<DescribeReport> {
        describe_model(&self.config)
    }
}

fn concat_rows(parts: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    let data: Vec<f32> = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Ok(Tensor::new(shape, data)?)
}

fn build_store<T: Element>(config: &ModelConfig, seed: u64) -> Result<ParameterStore<T>> {
    config.validate()?;
    let mut store = ParameterStore::new();
    let mut tape = Tape::new();
    let mut ctx = Ctx::building(&mut tape, &mut store, seed);
    let s = config.input_size;
    let x = ctx.tape.constant(Tensor::zeros(vec![1, config.in_channels, s, s]));
    model_forward(&mut ctx, config, x)?;
    Ok(store)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ModuleCost {
    pub module: String,
    pub params: usize,
    /// Multiply-accumulates for one input image.
    pub macs: u64,
}

/// Parameter and multiply-accumulate counts per top-level module.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DescribeReport {
    pub input: [usize; 3],
    pub modules: Vec<ModuleCost>,
    pub total_params: usize,
    pub total_macs: u64,
    pub fused_channels: usize,
}

impl fmt::Display for DescribeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "input {}x{}x{}, fused channels {}",
            self.input[0], self.input[1], self.input[2], self.fused_channels
        )?;
        writeln!(f, "{:<12} {:>12} {:>16}", "module", "params", "MACs")?;
        for m in &self.modules {
            writeln!(f, "{:<12} {:>12} {:>16}", m.module, m.params, m.macs)?;
        }
        write!(f, "{:<12} {:>12} {:>16}", "total", self.total_params, self.total_macs)
    }
}

/// Structural report for `config`: counts per module for a single image.
pub fn describe_model(config: &ModelConfig) -> Result<DescribeReport> {
    config.validate()?;
    let mut store = ParameterStore::<f32>::new();
    let mut tape = Tape::new();
    let mut ctx = Ctx::building(&mut tape, &mut store, 0);
    let s = config.input_size;
    let x = ctx.tape.constant(Tensor::zeros(vec![1, config.in_channels, s, s]));
    model_forward(&mut ctx, config, x)?;
    let macs = tape.mac_counts().clone();

    let mut params: BTreeMap<String, usize> = BTreeMap::new();
    for (_, p) in store.iter().filter(|(_, p)| p.trainable) {
        let module = p.name.split('.').next().unwrap_or_default().to_string();
        *params.entry(module).or_default() += p.value.numel();
    }
    let order = ["stem", "stage1", "stage2", "stage3", "stage4", "residual", "spatial", "fusion", "classifier"];
    let modules: Vec<ModuleCost> = order
        .iter()
        .map(|&m| ModuleCost {
            module: m.to_string(),
            params: params.get(m).copied().unwrap_or(0),
            macs: macs.get(m).copied().unwrap_or(0),
        })
        .collect();
    Ok(DescribeReport {
        input: [config.in_channels, s, s],
        total_params: modules.iter().map(|m| m.params).sum(),
        total_macs: modules.iter().map(|m| m.macs).sum(),
        modules,
        fused_channels: config.fused_channels(),
    })
}
