use crate::tape::{GradSink, Op};
use crate::{numel, Element, Result, Tape, Tensor, TensorError, Var};

/// Strided view of one logical `rows × cols` matrix operand.
#[derive(Clone, Copy, Debug)]
struct Layout {
    rs: usize,
    cs: usize,
}

impl Layout {
    fn new(transposed: bool, rows: usize, cols: usize) -> Self {
        if transposed {
            // stored as [cols, rows]
            Layout { rs: 1, cs: rows }
        } else {
            Layout { rs: cols, cs: 1 }
        }
    }

    fn t(self) -> Layout {
        Layout {
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// Accumulates the gradients of `C = A·B` (`A: m×k`, `B: k×n`) into the
/// stored buffers of A and B.
#[allow(clippy::too_many_arguments)]
fn matmul_grads<T: Element>(
    (m, k, n): (usize, usize, usize),
    a: &[T],
    la: Layout,
    b: &[T],
    lb: Layout,
    dc: &[T],
    da: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    if let Some(da) = da {
        // dA = dC · Bᵀ
        let bt = lb.t();
        T::gemm(m, n, k, T::one(), dc, n, 1, b, bt.rs, bt.cs, T::one(), da, la.rs, la.cs);
    }
    if let Some(db) = db {
        // dB = Aᵀ · dC
        let at = la.t();
        T::gemm(k, m, n, T::one(), a, at.rs, at.cs, dc, n, 1, T::one(), db, lb.rs, lb.cs);
    }
}

pub(crate) struct MatmulNode {
    a: Var,
    b: Var,
    batch: usize,
    dims: (usize, usize, usize),
    la: Layout,
    lb: Layout,
}

impl MatmulNode {
    pub fn backward<T: Element>(&self, grad: &[T], sink: &mut GradSink<'_, T>) -> Result<()> {
        let (m, k, n) = self.dims;
        let a = sink.value(self.a).data();
        let b = sink.value(self.b).data();
        let mut da = sink.wants(self.a).then(|| vec![T::zero(); a.len()]);
        let mut db = sink.wants(self.b).then(|| vec![T::zero(); b.len()]);
        for i in 0..self.batch {
            matmul_grads(
                self.dims,
                &a[i * m * k..(i + 1) * m * k],
                self.la,
                &b[i * k * n..(i + 1) * k * n],
                self.lb,
                &grad[i * m * n..(i + 1) * m * n],
                da.as_deref_mut().map(|d| &mut d[i * m * k..(i + 1) * m * k]),
                db.as_deref_mut().map(|d| &mut d[i * k * n..(i + 1) * k * n]),
            );
        }
        if let Some(da) = da {
            sink.add(self.a, &da);
        }
        if let Some(db) = db {
            sink.add(self.b, &db);
        }
        Ok(())
    }
}

pub(crate) struct LinearNode {
    input: Var,
    weight: Var,
    bias: Option<Var>,
    rows: usize,
    d_in: usize,
    d_out: usize,
}

impl LinearNode {
    pub fn backward<T: Element>(&self, grad: &[T], sink: &mut GradSink<'_, T>) -> Result<()> {
        let (m, k, n) = (self.rows, self.d_in, self.d_out);
        if let Some(bias) = self.bias.filter(|&b| sink.wants(b)) {
            let mut acc = vec![0.0f64; n];
            for r in 0..m {
                for (j, a) in acc.iter_mut().enumerate() {
                    *a += grad[r * n + j].widen();
                }
            }
            let db: Vec<T> = acc.into_iter().map(T::lift).collect();
            sink.add(bias, &db);
        }
        let x = sink.value(self.input).data();
        let w = sink.value(self.weight).data();
        let mut dx = sink.wants(self.input).then(|| vec![T::zero(); x.len()]);
        let mut dw = sink.wants(self.weight).then(|| vec![T::zero(); w.len()]);
        matmul_grads(
            (m, k, n),
            x,
            Layout::new(false, m, k),
            w,
            Layout::new(true, k, n),
            grad,
            dx.as_deref_mut(),
            dw.as_deref_mut(),
        );
        if let Some(dx) = dx {
            sink.add(self.input, &dx);
        }
        if let Some(dw) = dw {
            sink.add(self.weight, &dw);
        }
        Ok(())
    }
}

impl<T: Element> Tape<T> {
    /// Affine map over the trailing axis: `y = x·Wᵀ + b`, `W: [D_out, D_in]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        const OP: &str = "linear";
        let shape = self.shape(input).to_vec();
        let wshape = self.shape(weight).to_vec();
        if wshape.len() != 2 {
            return Err(TensorError::shape(OP, &wshape, "weight must be [D_out, D_in]"));
        }
        let (d_out, d_in) = (wshape[0], wshape[1]);
        let last = shape.last().copied().unwrap_or(0);
        if last != d_in {
            return Err(TensorError::axis(OP, "trailing input axis", d_in, last));
        }
        if let Some(b) = bias {
            if self.shape(b) != [d_out] {
                return Err(TensorError::axis(OP, "bias length", d_out, numel(self.shape(b))));
            }
        }
        let rows = numel(&shape) / d_in;
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let mut out = vec![T::zero(); rows * d_out];
        if let Some(b) = bias {
            let b = self.value(b).data();
            for row in out.chunks_mut(d_out) {
                row.copy_from_slice(b);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(rows, d_in, d_out, T::one(), x, d_in, 1, w, 1, d_in, beta, &mut out, d_out, 1);
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = d_out;
        let value = Tensor::new(out_shape, out)?;
        self.count_macs((rows * d_in * d_out) as u64);
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            value,
            Op::Linear(LinearNode {
                input,
                weight,
                bias,
                rows,
                d_in,
                d_out,
            }),
            &inputs,
        ))
    }

    /// Batched matrix product over identical leading axes.
    ///
    /// `a` is `[..., M, K]` (or `[..., K, M]` with `trans_a`), `b` is
    /// `[..., K, N]` (or `[..., N, K]` with `trans_b`); the result is
    /// `[..., M, N]`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        const OP: &str = "matmul";
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() != sa.len() {
            return Err(TensorError::shape(OP, &sb, format!("incompatible with {sa:?}")));
        }
        let r = sa.len();
        if sa[..r - 2] != sb[..r - 2] {
            return Err(TensorError::shape(OP, &sb, format!("leading axes differ from {sa:?}")));
        }
        let (m, k) = if trans_a { (sa[r - 1], sa[r - 2]) } else { (sa[r - 2], sa[r - 1]) };
        let (kb, n) = if trans_b { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if k != kb {
            return Err(TensorError::axis(OP, "contraction axis", k, kb));
        }
        let batch = numel(&sa[..r - 2]);
        let la = Layout::new(trans_a, m, k);
        let lb = Layout::new(trans_b, k, n);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &av[i * m * k..(i + 1) * m * k],
                la.rs,
                la.cs,
                &bv[i * k * n..(i + 1) * k * n],
                lb.rs,
                lb.cs,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                n,
                1,
            );
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let value = Tensor::new(shape, out)?;
        self.count_macs((batch * m * k * n) as u64);
        Ok(self.push(
            value,
            Op::Matmul(MatmulNode {
                a,
                b,
                batch,
                dims: (m, k, n),
                la,
                lb,
            }),
            &[a, b],
        ))
    }
}
