use crate::tape::{GradSink, Op};
use crate::{Element, Result, Tape, Tensor, TensorError, Var};

/// User-defined differentiable operation.
///
/// The forward value is computed by the caller; `backward` receives the
/// input values, the recorded output and the output gradient, and returns
/// one optional gradient per input.
pub trait CustomOp<T>: Send + Sync {
    fn name(&self) -> &str;
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>>;
}

pub(crate) struct CustomNode<T> {
    inputs: Vec<Var>,
    op: Box<dyn CustomOp<T>>,
}

impl<T: Element> CustomNode<T> {
    pub fn backward(&self, out: &Tensor<T>, grad: &[T], sink: &mut GradSink<'_, T>) -> Result<()> {
        let values: Vec<&Tensor<T>> = self.inputs.iter().map(|&v| sink.value(v)).collect();
        let g = Tensor::new(out.shape().to_vec(), grad.to_vec())?;
        let grads = self.op.backward(&values, out, &g);
        if grads.len() != self.inputs.len() {
            return Err(TensorError::invalid("custom", format!("`{}` returned {} gradients", self.op.name(), grads.len())));
        }
        for (&v, g) in self.inputs.iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != sink.value(v).shape() {
                    return Err(TensorError::shape("custom", g.shape(), format!("gradient of `{}` input", self.op.name())));
                }
                sink.add(v, g.data());
            }
        }
        Ok(())
    }
}

impl<T: Element> Tape<T> {
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        self.push(
            output,
            Op::Custom(CustomNode {
                inputs: inputs.to_vec(),
                op,
            }),
            inputs,
        )
    }
}
