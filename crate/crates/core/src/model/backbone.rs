//! SBCIT backbone: convolutional stem, four stages of CIT blocks with patch
//! embedding, and the smoothing/boundary pooling pair after each stage.

use sbcit_tensor::{Element, Pool2dOptions, PoolMode, Var};

use super::ctx::{Ctx, Init};
use super::layers::{conv, conv_bn_relu, layer_norm, linear, ConvSpec};
use crate::config::{BackboneConfig, WindowGeometry};
use crate::{Error, Result};

/// Token sequence `[N, H·W, D]` together with its grid extents.
#[derive(Clone, Copy, Debug)]
pub struct Tokens {
    pub var: Var,
    pub grid: (usize, usize),
    pub dim: usize,
}

/// Shape of one stage's attention.
#[derive(Clone, Copy, Debug)]
pub struct AttentionSpec {
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub kv_stride: usize,
}

impl AttentionSpec {
    fn geometry(&self, grid: (usize, usize)) -> Result<WindowGeometry> {
        let probe = BackboneConfig {
            window: self.window,
            kv_stride: self.kv_stride,
            ..BackboneConfig::default()
        };
        probe
            .window_geometry(grid)
            .map_err(|e| Error::Config(format!("attention on a {}×{} grid: {e}", grid.0, grid.1)))
    }
}

/// Stride-2 3×3 conv to `width` channels followed by two stride-1 3×3 convs,
/// each with batch normalization and ReLU.
pub fn stem_forward<T: Element>(ctx: &mut Ctx<'_, T>, image: Var, in_ch: usize, width: usize) -> Result<Var> {
    let x = conv_bn_relu(ctx, "stem.0", image, ConvSpec::new(in_ch, width, 3).stride(2))?;
    let x = conv_bn_relu(ctx, "stem.1", x, ConvSpec::new(width, width, 3))?;
    conv_bn_relu(ctx, "stem.2", x, ConvSpec::new(width, width, 3))
}

/// Strided 3×3 conv, flattening to tokens, then layer normalization.
pub fn patch_embed<T: Element>(
    ctx: &mut Ctx<'_, T>,
    name: &str,
    feat: Var,
    in_ch: usize,
    out_dim: usize,
    stride: usize,
) -> Result<Tokens> {
    let s = ctx.tape.shape(feat).to_vec();
    if s[2] % stride != 0 || s[3] % stride != 0 {
        return Err(Error::Config(format!(
            "{name}: map {}×{} is not divisible by stride {stride}",
            s[2], s[3]
        )));
    }
    let map = conv(ctx, &format!("{name}.conv"), feat, ConvSpec::new(in_ch, out_dim, 3).stride(stride))?;
    let grid = (s[2] / stride, s[3] / stride);
    let tokens = ctx.tape.map_to_tokens(map)?;
    let var = layer_norm(ctx, &format!("{name}.norm"), tokens, out_dim)?;
    Ok(Tokens { var, grid, dim: out_dim })
}

fn fold<T: Element>(ctx: &mut Ctx<'_, T>, t: Tokens) -> Result<Var> {
    Ok(ctx.tape.tokens_to_map(t.var, t.grid)?)
}

/// Local perception unit: depthwise 3×3 conv on the token grid plus identity.
pub fn lpu_forward<T: Element>(ctx: &mut Ctx<'_, T>, name: &str, t: Tokens) -> Result<Tokens> {
    let map = fold(ctx, t)?;
    let local = conv(ctx, &format!("{name}.dw"), map, ConvSpec::depthwise(t.dim))?;
    let local = ctx.tape.map_to_tokens(local)?;
    let var = ctx.tape.add(t.var, local)?;
    Ok(Tokens { var, ..t })
}

/// Table offsets for every (query, key) pair of one window, flattened as
/// `[tq, tk]`.
fn relative_index(g: &WindowGeometry, window: usize, kv_stride: usize) -> Vec<usize> {
    let side = 2 * window - 1;
    let w = window as isize;
    let clamp = |d: isize| (d.clamp(-(w - 1), w - 1) + w - 1) as usize;
    let mut idx = Vec::new();
    for qi in 0..g.window.0 {
        for qj in 0..g.window.1 {
            for ki in 0..g.kv_window.0 {
                for kj in 0..g.kv_window.1 {
                    let dy = qi as isize - (kv_stride * ki) as isize;
                    let dx = qj as isize - (kv_stride * kj) as isize;
                    idx.push(clamp(dy) * side + clamp(dx));
                }
            }
        }
    }
    idx
}

/// Splits `[N, rows·cols, D]` tokens into per-window, per-head groups
/// `[N·nh·nw·heads, wh·ww, dh]`.
fn partition<T: Element>(
    ctx: &mut Ctx<'_, T>,
    x: Var,
    n: usize,
    windows: (usize, usize),
    window: (usize, usize),
    heads: usize,
    dh: usize,
) -> Result<Var> {
    let (nh, nw) = windows;
    let (wh, ww) = window;
    let x = ctx.tape.reshape(x, &[n, nh, wh, nw, ww, heads, dh])?;
    let x = ctx.tape.permute(x, &[0, 1, 3, 5, 2, 4, 6])?;
    Ok(ctx.tape.reshape(x, &[n * nh * nw * heads, wh * ww, dh])?)
}

/// Low-complexity windowed multi-head self-attention.
///
/// Queries are grouped into non-overlapping windows. Keys and values are
/// downsampled by a strided depthwise conv, and each query window attends to
/// the downsampled tokens covering the same region. A learned relative
/// position bias is added to the scaled logits of every head.
pub fn lcmhsa_forward<T: Element>(ctx: &mut Ctx<'_, T>, name: &str, t: Tokens, spec: AttentionSpec) -> Result<Tokens> {
    let AttentionSpec {
        dim,
        heads,
        window,
        kv_stride,
    } = spec;
    if dim % heads != 0 {
        return Err(Error::Config(format!("{name}: width {dim} not divisible by {heads} heads")));
    }
    let g = spec.geometry(t.grid)?;
    let n = ctx.tape.shape(t.var)[0];
    let dh = dim / heads;

    let q = linear(ctx, &format!("{name}.q"), t.var, dim, dim)?;
    let k = linear(ctx, &format!("{name}.k"), t.var, dim, dim)?;
    let v = linear(ctx, &format!("{name}.v"), t.var, dim, dim)?;

    let reduce = |ctx: &mut Ctx<'_, T>, x: Var, which: &str| -> Result<Var> {
        let map = ctx.tape.tokens_to_map(x, t.grid)?;
        let spec = ConvSpec::depthwise(dim).stride(kv_stride);
        let map = conv(ctx, &format!("{name}.{which}_reduce"), map, spec)?;
        Ok(ctx.tape.map_to_tokens(map)?)
    };
    let k = reduce(ctx, k, "k")?;
    let v = reduce(ctx, v, "v")?;
    debug_assert_eq!(ctx.tape.shape(k)[1], g.kv_grid.0 * g.kv_grid.1);

    let q = partition(ctx, q, n, g.windows, g.window, heads, dh)?;
    let k = partition(ctx, k, n, g.windows, g.kv_window, heads, dh)?;
    let v = partition(ctx, v, n, g.windows, g.kv_window, heads, dh)?;

    let tq = g.window.0 * g.window.1;
    let tk = g.kv_window.0 * g.kv_window.1;
    let groups = n * g.windows.0 * g.windows.1;

    let logits = ctx.tape.matmul(q, k, false, true)?;
    let logits = ctx.tape.scale(logits, 1.0 / (dh as f64).sqrt());
    let logits = ctx.tape.reshape(logits, &[groups, heads, tq, tk])?;

    let side = 2 * window - 1;
    let table = ctx.param(&format!("{name}.rel_bias"), &[heads, side * side], Init::Zeros)?;
    let offsets = relative_index(&g, window, kv_stride);
    let index: Vec<usize> = (0..heads)
        .flat_map(|h| offsets.iter().map(move |&o| h * side * side + o))
        .collect();
    let bias = ctx.tape.gather(table, index, &[heads, tq, tk])?;
    let logits = ctx.tape.add(logits, bias)?;

    let attn = ctx.tape.softmax(logits, 3)?;
    ctx.tap("attention", attn);
    let attn = ctx.tape.reshape(attn, &[groups * heads, tq, tk])?;
    let out = ctx.tape.matmul(attn, v, false, false)?;

    let out = ctx
        .tape
        .reshape(out, &[n, g.windows.0, g.windows.1, heads, g.window.0, g.window.1, dh])?;
    let out = ctx.tape.permute(out, &[0, 1, 4, 2, 5, 3, 6])?;
    let out = ctx.tape.reshape(out, &[n, t.grid.0 * t.grid.1, dim])?;
    let var = linear(ctx, &format!("{name}.out"), out, dim, dim)?;
    Ok(Tokens { var, ..t })
}

/// Reversed residual feed-forward network: 1×1 expansion with GELU, a
/// depthwise 3×3 conv with its own identity skip, and a 1×1 projection.
pub fn rrffn_forward<T: Element>(ctx: &mut Ctx<'_, T>, name: &str, t: Tokens, expansion: usize) -> Result<Tokens> {
    let inner = t.dim * expansion;
    let map = fold(ctx, t)?;
    let h = conv(ctx, &format!("{name}.expand"), map, ConvSpec::new(t.dim, inner, 1))?;
    let h = ctx.tape.gelu(h);
    let local = conv(ctx, &format!("{name}.dw"), h, ConvSpec::depthwise(inner))?;
    let h = ctx.tape.add(local, h)?;
    let out = conv(ctx, &format!("{name}.project"), h, ConvSpec::new(inner, t.dim, 1))?;
    let var = ctx.tape.map_to_tokens(out)?;
    Ok(Tokens { var, ..t })
}

/// LPU, then pre-normalized attention and feed-forward sublayers, each with
/// a residual connection.
pub fn cit_block_forward<T: Element>(
    ctx: &mut Ctx<'_, T>,
    name: &str,
    x: Tokens,
    attn: AttentionSpec,
    expansion: usize,
) -> Result<Tokens> {
    let y = lpu_forward(ctx, &format!("{name}.lpu"), x)?;
    let n1 = layer_norm(ctx, &format!("{name}.norm1"), y.var, x.dim)?;
    let a = lcmhsa_forward(ctx, &format!("{name}.attn"), Tokens { var: n1, ..y }, attn)?;
    let z = ctx.tape.add(a.var, y.var)?;
    let n2 = layer_norm(ctx, &format!("{name}.norm2"), z, x.dim)?;
    let f = rrffn_forward(ctx, &format!("{name}.ffn"), Tokens { var: n2, ..y }, expansion)?;
    let var = ctx.tape.add(f.var, z)?;
    Ok(Tokens { var, ..x })
}

/// Smoothing (3×3 average) and boundary (3×3 max) pooling at stride 1,
/// summed and mixed by a 1×1 conv with ReLU.
pub fn smoothing_boundary<T: Element>(ctx: &mut Ctx<'_, T>, name: &str, map: Var, channels: usize) -> Result<Var> {
    let opts = Pool2dOptions::new(3, 1, 1);
    let smooth = ctx.tape.pool2d(map, PoolMode::Avg, opts)?;
    let boundary = ctx.tape.pool2d(map, PoolMode::Max, opts)?;
    ctx.tap("sb_avg", smooth);
    ctx.tap("sb_max", boundary);
    let sum = ctx.tape.add(smooth, boundary)?;
    let mixed = conv(ctx, &format!("{name}.mix"), sum, ConvSpec::new(channels, channels, 1))?;
    Ok(ctx.tape.relu(mixed))
}

pub fn stage_forward<T: Element>(ctx: &mut Ctx<'_, T>, cfg: &BackboneConfig, stage: usize, feat: Var) -> Result<Var> {
    let in_ch = ctx.tape.shape(feat)[1];
    let dim = cfg.stage_dims[stage];
    let name = format!("stage{}", stage + 1);
    let mut t = patch_embed(ctx, &format!("{name}.embed"), feat, in_ch, dim, 2)?;
    let attn = AttentionSpec {
        dim,
        heads: cfg.stage_heads[stage],
        window: cfg.window,
        kv_stride: cfg.kv_stride,
    };
    for b in 0..cfg.stage_depths[stage] {
        t = cit_block_forward(ctx, &format!("{name}.block{b}"), t, attn, cfg.expansion)?;
    }
    let map = fold(ctx, t)?;
    smoothing_boundary(ctx, &format!("{name}.sb"), map, dim)
}

/// Runs the four stages on stem features and returns every stage output;
/// the last one is the backbone feature map used for fusion.
pub fn backbone_forward<T: Element>(ctx: &mut Ctx<'_, T>, cfg: &BackboneConfig, stem: Var) -> Result<Vec<Var>> {
    let mut outs = Vec::with_capacity(4);
    let mut x = stem;
    for stage in 0..4 {
        ctx.tape.set_scope(format!("stage{}", stage + 1));
        x = stage_forward(ctx, cfg, stage, x)?;
        outs.push(x);
    }
    Ok(outs)
}
