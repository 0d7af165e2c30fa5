use crate::tape::{GradSink, Op};
use crate::{numel, Element, Result, Tape, Tensor, TensorError, Var};

pub(crate) struct SoftmaxNode {
    input: Var,
    outer: usize,
    len: usize,
    inner: usize,
}

impl SoftmaxNode {
    pub fn backward<T: Element>(&self, out: &Tensor<T>, grad: &[T], sink: &mut GradSink<'_, T>) -> Result<()> {
        if !sink.wants(self.input) {
            return Ok(());
        }
        let y = out.data();
        let dx = sink.slot(self.input);
        for o in 0..self.outer {
            for i in 0..self.inner {
                let at = |k: usize| (o * self.len + k) * self.inner + i;
                let dot: f64 = (0..self.len).map(|k| grad[at(k)].widen() * y[at(k)].widen()).sum();
                for k in 0..self.len {
                    let j = at(k);
                    dx[j] = dx[j] + T::lift(y[j].widen() * (grad[j].widen() - dot));
                }
            }
        }
        Ok(())
    }
}

impl<T: Element> Tape<T> {
    /// Softmax along `axis`, stabilised by subtracting the axis maximum.
    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::invalid(
                "softmax",
                format!("axis {axis} out of range for rank {}", shape.len()),
            ));
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let x = self.value(input).data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| x[at(k)].widen()).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0f64;
                for k in 0..len {
                    total += (x[at(k)].widen() - max).exp();
                }
                for k in 0..len {
                    out[at(k)] = T::lift((x[at(k)].widen() - max).exp() / total);
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Softmax(SoftmaxNode { input, outer, len, inner }), &[input]))
    }
}
