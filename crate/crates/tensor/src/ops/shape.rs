use crate::tape::{GradSink, Op};
use crate::{numel, Element, Result, Tape, Tensor, TensorError, Var};

pub(crate) struct ReshapeNode {
    input: Var,
}

impl ReshapeNode {
    pub fn backward<T: Element>(&self, grad: &[T], sink: &mut GradSink<'_, T>) -> Result<()> {
        sink.add(self.input, grad);
        Ok(())
    }
}

/// For each output flat index, the input flat index under `perm`.
fn permute_map(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = in_shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = numel(in_shape);
    let mut map = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..total {
        map.push(flat);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            flat += strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            flat -= strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    map
}

pub(crate) struct PermuteNode {
    input: Var,
    map: Vec<usize>,
}

impl PermuteNode {
    pub fn backward<T: Element>(&self, grad: &[T], sink: &mut GradSink<'_, T>) -> Result<()> {
        if !sink.wants(self.input) {
            return Ok(());
        }
        let dx = sink.slot(self.input);
        for (o, &i) in self.map.iter().enumerate() {
            dx[i] = dx[i] + grad[o];
        }
        Ok(())
    }
}

pub(crate) struct ConcatNode {
    parts: Vec<(Var, usize)>,
    outer: usize,
    inner: usize,
    total: usize,
}

impl ConcatNode {
    pub fn backward<T: Element>(&self, grad: &[T], sink: &mut GradSink<'_, T>) -> Result<()> {
        let mut offset = 0;
        for &(v, len) in &self.parts {
            if sink.wants(v) {
                let dx = sink.slot(v);
                for o in 0..self.outer {
                    let src = &grad[(o * self.total + offset) * self.inner..(o * self.total + offset + len) * self.inner];
                    let dst = &mut dx[o * len * self.inner..(o + 1) * len * self.inner];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
            }
            offset += len;
        }
        Ok(())
    }
}

pub(crate) struct NarrowNode {
    input: Var,
    outer: usize,
    extent: usize,
    start: usize,
    len: usize,
    inner: usize,
}

impl NarrowNode {
    pub fn backward<T: Element>(&self, grad: &[T], sink: &mut GradSink<'_, T>) -> Result<()> {
        if !sink.wants(self.input) {
            return Ok(());
        }
        let dx = sink.slot(self.input);
        let chunk = self.len * self.inner;
        for o in 0..self.outer {
            let base = (o * self.extent + self.start) * self.inner;
            for (d, &g) in dx[base..base + chunk].iter_mut().zip(&grad[o * chunk..(o + 1) * chunk]) {
                *d = *d + g;
            }
        }
        Ok(())
    }
}

pub(crate) struct GatherNode {
    input: Var,
    index: Vec<usize>,
}

impl GatherNode {
    pub fn backward<T: Element>(&self, grad: &[T], sink: &mut GradSink<'_, T>) -> Result<()> {
        if !sink.wants(self.input) {
            return Ok(());
        }
        let mut acc = vec![0.0f64; sink.value(self.input).numel()];
        for (o, &i) in self.index.iter().enumerate() {
            acc[i] += grad[o].widen();
        }
        let acc: Vec<T> = acc.into_iter().map(T::lift).collect();
        sink.add(self.input, &acc);
        Ok(())
    }
}

impl<T: Element> Tape<T> {
    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(ReshapeNode { input }), &[input]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, input: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::invalid("permute", format!("{perm:?} is not a permutation of rank {}", shape.len())));
        }
        let map = permute_map(&shape, perm);
        let x = self.value(input).data();
        let out: Vec<T> = map.iter().map(|&i| x[i]).collect();
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Permute(PermuteNode { input, map }), &[input]))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        const OP: &str = "concat";
        let first = parts
            .first()
            .map(|&v| self.shape(v).to_vec())
            .ok_or_else(|| TensorError::invalid(OP, "no inputs"))?;
        if axis >= first.len() {
            return Err(TensorError::invalid(OP, format!("axis {axis} out of range")));
        }
        for (i, &p) in parts.iter().enumerate() {
            let s = self.shape(p);
            if s.len() != first.len() {
                return Err(TensorError::shape(OP, s, format!("part {i} rank differs from {first:?}")));
            }
            for ax in (0..first.len()).filter(|&ax| ax != axis) {
                if s[ax] != first[ax] {
                    return Err(TensorError::axis(OP, format!("axis {ax} of part {i}"), first[ax], s[ax]));
                }
            }
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let lens: Vec<(Var, usize)> = parts.iter().map(|&p| (p, self.shape(p)[axis])).collect();
        let total: usize = lens.iter().map(|&(_, l)| l).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &(v, len) in &lens {
                let x = self.value(v).data();
                out.extend_from_slice(&x[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Concat(ConcatNode {
                parts: lens,
                outer,
                inner,
                total,
            }),
            parts,
        ))
    }

    /// Selects `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let x = self.value(input);
        let value = x.narrow(axis, start, len)?;
        let shape = x.shape();
        let node = NarrowNode {
            input,
            outer: numel(&shape[..axis]),
            extent: shape[axis],
            start,
            len,
            inner: numel(&shape[axis + 1..]),
        };
        Ok(self.push(value, Op::Narrow(node), &[input]))
    }

    /// `out[i] = input.flat[index[i]]`, shaped as `shape`.
    pub fn gather(&mut self, input: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let x = self.value(input).data();
        if index.len() != numel(shape) {
            return Err(TensorError::shape("gather", shape, format!("needs {} indices", index.len())));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= x.len()) {
            return Err(TensorError::invalid("gather", format!("index {bad} out of range {}", x.len())));
        }
        let out: Vec<T> = index.iter().map(|&i| x[i]).collect();
        let value = Tensor::new(shape.to_vec(), out)?;
        Ok(self.push(value, Op::Gather(GatherNode { input, index }), &[input]))
    }

    /// `[N, C, H, W] → [N, H·W, C]` (row-major token order).
    pub fn map_to_tokens(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        super::expect_rank("map_to_tokens", &s, 4)?;
        let p = self.permute(input, &[0, 2, 3, 1])?;
        self.reshape(p, &[s[0], s[2] * s[3], s[1]])
    }

    /// `[N, H·W, C] → [N, C, H, W]`.
    pub fn tokens_to_map(&mut self, input: Var, grid: (usize, usize)) -> Result<Var> {
        let s = self.shape(input).to_vec();
        super::expect_rank("tokens_to_map", &s, 3)?;
        if s[1] != grid.0 * grid.1 {
            return Err(TensorError::axis("tokens_to_map", "token axis (1)", grid.0 * grid.1, s[1]));
        }
        let r = self.reshape(input, &[s[0], grid.0, grid.1, s[2]])?;
        self.permute(r, &[0, 3, 1, 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn concat_channels_in_argument_order() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::full(vec![2, 64, 3, 3], 1.0));
        let b = tape.constant(Tensor::full(vec![2, 64, 3, 3], 2.0));
        let c = tape.constant(Tensor::full(vec![2, 128, 3, 3], 3.0));
        let y = tape.concat(&[a, b, c], 1).unwrap();
        assert_eq!(tape.shape(y), &[2, 256, 3, 3]);
        let v = tape.value(y).clone();
        assert_eq!(&v.narrow(1, 0, 64).unwrap(), tape.value(a));
        assert_eq!(&v.narrow(1, 64, 64).unwrap(), tape.value(b));
        assert_eq!(&v.narrow(1, 128, 128).unwrap(), tape.value(c));
        let single = tape.concat(&[a], 1).unwrap();
        assert_eq!(tape.value(single), tape.value(a));
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(vec![1, 2, 4, 4]));
        let b = tape.constant(Tensor::zeros(vec![1, 2, 2, 4]));
        let err = tape.concat(&[a, b], 1).unwrap_err();
        assert!(err.to_string().contains("axis 2"), "{err}");
    }

    #[test]
    fn token_round_trip() {
        let mut tape = Tape::<f32>::new();
        let m = tape.constant(Tensor::from_fn(vec![2, 5, 3, 4], |i| i as f32));
        let t = tape.map_to_tokens(m).unwrap();
        assert_eq!(tape.shape(t), &[2, 12, 5]);
        // token (row 1, col 2) of sample 1, channel 3
        assert_eq!(tape.value(t).at(&[1, 6, 3]), tape.value(m).at(&[1, 3, 1, 2]));
        let back = tape.tokens_to_map(t, (3, 4)).unwrap();
        assert_eq!(tape.value(back), tape.value(m));
    }

    proptest! {
        #[test]
        fn permute_then_inverse_is_identity(dims in proptest::collection::vec(1usize..4, 1..6), seed in 0u64..1000) {
            let rank = dims.len();
            let mut perm: Vec<usize> = (0..rank).collect();
            let mut s = seed;
            for i in (1..rank).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                perm.swap(i, (s >> 33) as usize % (i + 1));
            }
            let mut inv = vec![0; rank];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(Tensor::from_fn(dims.clone(), |i| i as f32));
            let y = tape.permute(x, &perm).unwrap();
            let z = tape.permute(y, &inv).unwrap();
            prop_assert_eq!(tape.value(z), tape.value(x));
        }
    }
}
