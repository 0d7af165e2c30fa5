use crate::tape::{GradSink, Op};
use crate::{Element, Result, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Exact form `x·Φ(x)` with Φ the standard normal CDF.
    Gelu,
    Sigmoid,
}


impl Activation {
    /// Scalar evaluation in `f64`.
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => x * gelu_parts(x).0,
            Activation::Sigmoid => sigmoid(x),
        }
    }
}

fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn gelu_parts<T: Element>(x: T) -> (T, T) {
    x.normal_cdf_pdf()
}

pub(crate) struct ActivationNode {
    input: Var,
    kind: Activation,
}

impl ActivationNode {
    pub fn backward<T: Element>(&self, out: &Tensor<T>, grad: &[T], sink: &mut GradSink<'_, T>) -> Result<()> {
        if !sink.wants(self.input) {
            return Ok(());
        }
        let x = sink.value(self.input).data();
        let y = out.data();
        let dx = sink.slot(self.input);
        match self.kind {
            Activation::Relu => {
                for ((d, &g), &xv) in dx.iter_mut().zip(grad).zip(x) {
                    if xv > T::zero() {
                        *d = *d + g;
                    }
                }
            }
            Activation::Gelu => {
                for ((d, &g), &xv) in dx.iter_mut().zip(grad).zip(x) {
                    let (cdf, pdf) = gelu_parts(xv);
                    *d = *d + g * (cdf + xv * pdf);
                }
            }
            Activation::Sigmoid => {
                for ((d, &g), &yv) in dx.iter_mut().zip(grad).zip(y) {
                    *d = *d + g * yv * (T::one() - yv);
                }
            }
        }
        Ok(())
    }
}

impl<T: Element> Tape<T> {
    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let x = self.value(input);
        let value = match kind {
            Activation::Relu => x.map(|v| v.max(T::zero())),
            Activation::Gelu => x.map(|v| v * gelu_parts(v).0),
            Activation::Sigmoid => x.map(sigmoid),
        };
        self.push(value, Op::Activation(ActivationNode { input, kind }), &[input])
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Relu)
    }

    pub fn gelu(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Gelu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Sigmoid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_points() {
        assert_eq!(Activation::Gelu.apply(0.0), 0.0);
        assert_eq!(Activation::Relu.apply(-2.0), 0.0);
        assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
    }

    #[test]
    fn gelu_at_one_matches_normal_cdf() {
        // Φ(1) = 0.841344746068543 (standard normal table value)
        assert!((Activation::Gelu.apply(1.0) - 0.841_344_746_068_543).abs() < 1e-12);
        assert!((Activation::Gelu.apply(1.0) - 0.841345).abs() < 1e-6);
    }

    #[test]
    fn relu_on_vector() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(vec![2], vec![-1.0, 3.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 3.0]);
    }

    #[test]
    fn sigmoid_saturates_without_overflow() {
        assert_eq!(Activation::Sigmoid.apply(-1000.0), 0.0);
        assert_eq!(Activation::Sigmoid.apply(1000.0), 1.0);
        assert_eq!(Activation::Sigmoid.apply(20.0) as f32, 1.0);
    }
}
