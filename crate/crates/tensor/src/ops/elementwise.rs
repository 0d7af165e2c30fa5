use crate::tape::{GradSink, Op};
use crate::{numel, Element, Result, Tape, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// Maps every flat index of the output shape to the flat index of an
/// operand broadcast against it (operand axes are right-aligned; extents
/// are either equal or 1).
fn broadcast_index(out: &[usize], operand: &[usize]) -> Option<Vec<usize>> {
    if operand.len() > out.len() {
        return None;
    }
    let offset = out.len() - operand.len();
    let mut strides = vec![0usize; out.len()];
    let mut stride = 1;
    for i in (0..operand.len()).rev() {
        let d = operand[i];
        let o = out[i + offset];
        if d == o {
            strides[i + offset] = if d == 1 { 0 } else { stride };
        } else if d == 1 {
            strides[i + offset] = 0;
        } else {
            return None;
        }
        stride *= d;
    }
    let total = numel(out);
    let mut map = Vec::with_capacity(total);
    let mut counter = vec![0usize; out.len()];
    let mut flat = 0usize;
    for _ in 0..total {
        map.push(flat);
        for ax in (0..out.len()).rev() {
            counter[ax] += 1;
            flat += strides[ax];
            if counter[ax] < out[ax] {
                break;
            }
            flat -= strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    Some(map)
}

pub(crate) struct BinaryNode {
    a: Var,
    b: Var,
    kind: BinaryKind,
    /// `None` when both operands share the output shape.
    b_map: Option<Vec<usize>>,
}

impl BinaryNode {
    pub fn backward<T: Element>(&self, grad: &[T], sink: &mut GradSink<'_, T>) -> Result<()> {
        let bi = |i: usize| self.b_map.as_ref().map_or(i, |m| m[i]);
        if sink.wants(self.a) {
            match self.kind {
                BinaryKind::Add | BinaryKind::Sub => sink.add(self.a, grad),
                BinaryKind::Mul => {
                    let b = sink.value(self.b).data();
                    let da: Vec<T> = grad.iter().enumerate().map(|(i, &g)| g * b[bi(i)]).collect();
                    sink.add(self.a, &da);
                }
            }
        }
        if sink.wants(self.b) {
            let a = sink.value(self.a).data();
            let nb = sink.value(self.b).numel();
            let mut db = vec![0.0f64; nb];
            for (i, &g) in grad.iter().enumerate() {
                let contrib = match self.kind {
                    BinaryKind::Add => g.widen(),
                    BinaryKind::Sub => -g.widen(),
                    BinaryKind::Mul => g.widen() * a[i].widen(),
                };
                db[bi(i)] += contrib;
            }
            let db: Vec<T> = db.into_iter().map(T::lift).collect();
            sink.add(self.b, &db);
        }
        Ok(())
    }
}

pub(crate) struct ScaleNode<T> {
    input: Var,
    factor: T,
}

impl<T: Element> ScaleNode<T> {
    pub fn backward(&self, grad: &[T], sink: &mut GradSink<'_, T>) -> Result<()> {
        let g: Vec<T> = grad.iter().map(|&g| g * self.factor).collect();
        sink.add(self.input, &g);
        Ok(())
    }
}

pub(crate) struct ReduceNode {
    input: Var,
    mean: bool,
}

impl ReduceNode {
    pub fn backward<T: Element>(&self, grad: &[T], sink: &mut GradSink<'_, T>) -> Result<()> {
        if !sink.wants(self.input) {
            return Ok(());
        }
        let n = sink.value(self.input).numel();
        let g = if self.mean {
            grad[0] / T::lift(n as f64)
        } else {
            grad[0]
        };
        for v in sink.slot(self.input) {
            *v = *v + g;
        }
        Ok(())
    }
}

pub(crate) struct SpatialMeanNode {
    input: Var,
    hw: usize,
}

impl SpatialMeanNode {
    pub fn backward<T: Element>(&self, grad: &[T], sink: &mut GradSink<'_, T>) -> Result<()> {
        if !sink.wants(self.input) {
            return Ok(());
        }
        let inv = T::lift(1.0 / self.hw as f64);
        let dx = sink.slot(self.input);
        for (plane, &g) in dx.chunks_mut(self.hw).zip(grad) {
            for v in plane {
                *v = *v + g * inv;
            }
        }
        Ok(())
    }
}

impl<T: Element> Tape<T> {
    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let b_map = if sa == sb {
            None
        } else {
            Some(broadcast_index(&sa, &sb).ok_or_else(|| {
                TensorError::shape("broadcast", &sb, format!("does not broadcast to {sa:?}"))
            })?)
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let bi = |i: usize| b_map.as_ref().map_or(i, |m| m[i]);
        let out: Vec<T> = av
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bv[bi(i)];
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                }
            })
            .collect();
        let value = Tensor::new(sa, out)?;
        Ok(self.push(value, Op::Binary(BinaryNode { a, b, kind, b_map }), &[a, b]))
    }

    /// `a + b`, with `b` broadcast to the shape of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    /// `a − b`, with `b` broadcast to the shape of `a`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    /// `a ⊙ b`, with `b` broadcast to the shape of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let factor = T::lift(factor);
        let value = self.value(input).map(|v| v * factor);
        self.push(value, Op::Scale(ScaleNode { input, factor }), &[input])
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, input: Var) -> Var {
        self.reduce(input, false)
    }

    /// Mean of all elements as a scalar.
    pub fn mean(&mut self, input: Var) -> Var {
        self.reduce(input, true)
    }

    fn reduce(&mut self, input: Var, mean: bool) -> Var {
        let x = self.value(input).data();
        let mut s: f64 = x.iter().map(|v| v.widen()).sum();
        if mean {
            s /= x.len() as f64;
        }
        self.push(Tensor::scalar(T::lift(s)), Op::Reduce(ReduceNode { input, mean }), &[input])
    }

    /// Global average pooling: `[N, C, H, W] → [N, C]`.
    pub fn spatial_mean(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        super::expect_rank("spatial_mean", &shape, 4)?;
        let hw = shape[2] * shape[3];
        let out: Vec<T> = self
            .value(input)
            .data()
            .chunks(hw)
            .map(|p| T::lift(p.iter().map(|v| v.widen()).sum::<f64>() / hw as f64))
            .collect();
        let value = Tensor::new(vec![shape[0], shape[1]], out)?;
        Ok(self.push(value, Op::SpatialMean(SpatialMeanNode { input, hw }), &[input]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_over_leading_and_unit_axes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_fn(vec![2, 3, 2], |i| i as f64));
        let b = tape.leaf(Tensor::new(vec![3, 1], vec![10.0, 20.0, 30.0]).unwrap());
        let y = tape.add(a, b).unwrap();
        assert_eq!(
            tape.value(y).data(),
            &[10.0, 11.0, 22.0, 23.0, 34.0, 35.0, 16.0, 17.0, 28.0, 29.0, 40.0, 41.0]
        );
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[4.0, 4.0, 4.0]);
    }

    #[test]
    fn gate_broadcast_over_channels() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(vec![1, 3, 2, 2], |i| i as f64));
        let gate = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 0.5, 1.0]).unwrap());
        let y = tape.mul(x, gate).unwrap();
        assert_eq!(&tape.value(y).data()[4..8], &[0.0, 5.0, 3.0, 7.0]);
    }

    #[test]
    fn incompatible_broadcast_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2]));
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn spatial_mean_of_constant_map() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(vec![2, 3, 4, 4], 2.5));
        let y = tape.spatial_mean(x).unwrap();
        assert_eq!(tape.shape(y), &[2, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 2.5));
    }
}
