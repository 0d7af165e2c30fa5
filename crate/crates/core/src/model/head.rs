use sbcit_tensor::{Element, Var};

use super::ctx::{Ctx, Init};
use super::layers::{conv, ConvSpec};
use crate::Result;

/// Concatenates the residual, spatial and backbone maps along channels.
pub fn channel_enhance<T: Element>(ctx: &mut Ctx<'_, T>, x_r: Var, x_s: Var, x_sbcit: Var) -> Result<Var> {
    Ok(ctx.tape.concat(&[x_r, x_s, x_sbcit], 1)?)
}

/// Single-channel sigmoid gate over the enhanced map.
///
/// `z = relu(y_X * Z + y_SA * ctx(Z) + b_SA)` with `ctx` a depthwise 3×3 conv,
/// `gate = sigmoid(f * z + b_f)`, output `gate ⊙ Z` broadcast over channels.
pub fn spatial_attention<T: Element>(ctx: &mut Ctx<'_, T>, z: Var, hidden: usize) -> Result<Var> {
    let c = ctx.tape.shape(z)[1];
    let context = conv(ctx, "fusion.context", z, ConvSpec::depthwise(c).no_bias())?;
    let direct = conv(ctx, "fusion.y_x", z, ConvSpec::new(c, hidden, 1).no_bias())?;
    let spatial = conv(ctx, "fusion.y_sa", context, ConvSpec::new(c, hidden, 1))?;
    let pre = ctx.tape.add(direct, spatial)?;
    let z_relu = ctx.tape.relu(pre);
    let logit = conv(ctx, "fusion.gate", z_relu, ConvSpec::new(hidden, 1, 1))?;
    let gate = ctx.tape.sigmoid(logit);
    ctx.tap("gate", gate);
    Ok(ctx.tape.mul(z, gate)?)
}

/// Classifier variables produced by the head.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub logits: Var,
    pub probabilities: Var,
    pub penultimate: Var,
}

/// Global average pooling, dropout, fully connected layer and softmax.
pub fn classify<T: Element>(ctx: &mut Ctx<'_, T>, z: Var, num_classes: usize, dropout: f64) -> Result<HeadOutput> {
    let c = ctx.tape.shape(z)[1];
    let penultimate = ctx.tape.spatial_mean(z)?;
    let dropped = ctx.dropout(penultimate, dropout)?;
    let w = ctx.param("classifier.fc.weight", &[num_classes, c], Init::Zeros)?;
    let b = ctx.param("classifier.fc.bias", &[num_classes], Init::Zeros)?;
    let logits = ctx.tape.linear(dropped, w, Some(b))?;
    let probabilities = ctx.tape.softmax(logits, 1)?;
    Ok(HeadOutput {
        logits,
        probabilities,
        penultimate,
    })
}
