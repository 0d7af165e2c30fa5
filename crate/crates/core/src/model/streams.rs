use sbcit_tensor::{Element, Pool2dOptions, PoolMode, Var};

use super::ctx::Ctx;
use super::layers::{batch_norm, conv, ConvSpec};
use crate::config::{ModelConfig, ResidualStreamConfig, SpatialStreamConfig};
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    /// Two 3×3 convolutions.
    K,
    /// 1×1 pointwise convolution, then 3×3.
    L,
}

/// Residual block: `relu(T(x) + shortcut(x))`, where the shortcut is the
/// identity when shapes agree and a strided 1×1 projection otherwise.
pub fn residual_block_forward<T: Element>(
    ctx: &mut Ctx<'_, T>,
    name: &str,
    x: Var,
    kind: BlockKind,
    in_ch: usize,
    out_ch: usize,
    stride: usize,
) -> Result<Var> {
    let first = match kind {
        BlockKind::K => ConvSpec::new(in_ch, out_ch, 3),
        BlockKind::L => ConvSpec::new(in_ch, out_ch, 1),
    };
    let h = conv(ctx, &format!("{name}.t1"), x, first.stride(stride))?;
    let h = ctx.tape.relu(h);
    let h = conv(ctx, &format!("{name}.t2"), h, ConvSpec::new(out_ch, out_ch, 3))?;
    let shortcut = if in_ch == out_ch && stride == 1 {
        x
    } else {
        let spec = ConvSpec::new(in_ch, out_ch, 1).stride(stride).no_bias();
        conv(ctx, &format!("{name}.proj"), x, spec)?
    };
    let y = ctx.tape.add(h, shortcut)?;
    Ok(ctx.tape.relu(y))
}

/// Four stride-2 blocks K, L, K, L over the stem features, then dropout.
pub fn residual_stream_forward<T: Element>(
    ctx: &mut Ctx<'_, T>,
    cfg: &ResidualStreamConfig,
    dropout: f64,
    stem: Var,
) -> Result<Var> {
    let mut x = stem;
    let mut in_ch = ctx.tape.shape(stem)[1];
    for (i, &out_ch) in cfg.block_channels.iter().enumerate() {
        let kind = if i % 2 == 0 { BlockKind::K } else { BlockKind::L };
        x = residual_block_forward(ctx, &format!("residual.block{i}"), x, kind, in_ch, out_ch, 2)?;
        in_ch = out_ch;
    }
    ctx.dropout(x, dropout)
}

/// Squeezed 3×3 conv (half the output width) with batch norm and ReLU, a
/// 3×3 conv to the output width, then 2×2 stride-2 pooling.
pub fn spatial_block_forward<T: Element>(
    ctx: &mut Ctx<'_, T>,
    name: &str,
    x: Var,
    in_ch: usize,
    out_ch: usize,
    pool: PoolMode,
) -> Result<Var> {
    let squeeze = (out_ch / 2).max(1);
    let h = conv(ctx, &format!("{name}.squeeze"), x, ConvSpec::new(in_ch, squeeze, 3).no_bias())?;
    let h = batch_norm(ctx, &format!("{name}.bn"), h, squeeze)?;
    let h = ctx.tape.relu(h);
    let h = conv(ctx, &format!("{name}.conv"), h, ConvSpec::new(squeeze, out_ch, 3))?;
    Ok(ctx.tape.pool2d(h, pool, Pool2dOptions::new(2, 2, 0))?)
}

/// Pool mode of spatial block `i`: max, avg, max, ...
pub fn spatial_pool_mode(i: usize) -> PoolMode {
    if i % 2 == 0 {
        PoolMode::Max
    } else {
        PoolMode::Avg
    }
}

/// Five spatial blocks over the input image and a 1×1 conv to `out_width`.
pub fn spatial_stream_forward<T: Element>(
    ctx: &mut Ctx<'_, T>,
    cfg: &SpatialStreamConfig,
    out_width: usize,
    image: Var,
    pools: impl Fn(usize) -> PoolMode,
) -> Result<Var> {
    let mut x = image;
    let mut in_ch = ctx.tape.shape(image)[1];
    for (i, &out_ch) in cfg.block_channels.iter().enumerate() {
        x = spatial_block_forward(ctx, &format!("spatial.block{i}"), x, in_ch, out_ch, pools(i))?;
        in_ch = out_ch;
    }
    conv(ctx, "spatial.align", x, ConvSpec::new(in_ch, out_width, 1))
}

/// Checks that the three streams agree on N, H and W.
pub fn check_alignment(cfg: &ModelConfig, shapes: [(&str, &[usize]); 3]) -> Result<()> {
    let reference = shapes[2].1;
    for (_, s) in shapes {
        if s[0] != reference[0] || s[2..] != reference[2..] {
            let all: Vec<String> = shapes.iter().map(|(n, s)| format!("{n} {s:?}")).collect();
            return Err(crate::Error::Config(format!(
                "stream shapes do not align for {}×{} input: {}",
                cfg.input_size,
                cfg.input_size,
                all.join(", ")
            )));
        }
    }
    Ok(())
}
