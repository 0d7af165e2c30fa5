use super::expect_rank;
use crate::tape::{GradSink, Op};
use crate::{Element, Result, Tape, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pool2dOptions {
    pub window: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Pool2dOptions {
    pub fn new(window: usize, stride: usize, padding: usize) -> Self {
        Pool2dOptions {
            window,
            stride,
            padding,
        }
    }
}

pub(crate) struct PoolNode {
    input: Var,
    mode: PoolMode,
    in_shape: [usize; 4],
    /// Average: in-bounds element count per output. Max: flat argmax per output.
    route: Vec<usize>,
    opts: Pool2dOptions,
    out_hw: (usize, usize),
}

impl PoolNode {
    pub fn backward<T: Element>(&self, grad: &[T], sink: &mut GradSink<'_, T>) -> Result<()> {
        if !sink.wants(self.input) {
            return Ok(());
        }
        let [n, c, h, w] = self.in_shape;
        let (oh, ow) = self.out_hw;
        let dx = sink.slot(self.input);
        match self.mode {
            PoolMode::Max => {
                for (o, &src) in self.route.iter().enumerate() {
                    dx[src] = dx[src] + grad[o];
                }
            }
            PoolMode::Avg => {
                for plane in 0..n * c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let o = (plane * oh + oy) * ow + ox;
                            let share = grad[o] / T::lift(self.route[o] as f64);
                            let (y0, y1, x0, x1) = window_bounds(oy, ox, &self.opts, h, w);
                            for iy in y0..y1 {
                                let row = plane * h * w + iy * w;
                                for d in &mut dx[row + x0..row + x1] {
                                    *d = *d + share;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// In-bounds input rows and columns covered by output `(oy, ox)`.
#[inline]
fn window_bounds(oy: usize, ox: usize, o: &Pool2dOptions, h: usize, w: usize) -> (usize, usize, usize, usize) {
    let y0 = (oy * o.stride).saturating_sub(o.padding);
    let x0 = (ox * o.stride).saturating_sub(o.padding);
    let y1 = (oy * o.stride + o.window - o.padding).min(h);
    let x1 = (ox * o.stride + o.window - o.padding).min(w);
    (y0, y1, x0, x1)
}

impl<T: Element> Tape<T> {
    /// Square-window pooling over `[N, C, H, W]`.
    ///
    /// Max pooling routes the gradient to the first maximal element in
    /// row-major scan order. Average pooling divides by the number of
    /// in-bounds elements, which is `window²` whenever `padding == 0`.
    pub fn pool2d(&mut self, input: Var, mode: PoolMode, opts: Pool2dOptions) -> Result<Var> {
        const OP: &str = "pool2d";
        let shape = self.shape(input).to_vec();
        expect_rank(OP, &shape, 4)?;
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let Pool2dOptions {
            window,
            stride,
            padding,
        } = opts;
        if window == 0 || stride == 0 {
            return Err(TensorError::invalid(OP, "window and stride must be positive"));
        }
        if padding >= window {
            return Err(TensorError::invalid(OP, "padding must be smaller than the window"));
        }
        if window > h + 2 * padding || window > w + 2 * padding {
            return Err(TensorError::invalid(
                OP,
                format!("window {window} larger than padded input {}x{}", h + 2 * padding, w + 2 * padding),
            ));
        }
        let oh = (h + 2 * padding - window) / stride + 1;
        let ow = (w + 2 * padding - window) / stride + 1;
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut route = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y0, y1, x0, x1) = window_bounds(oy, ox, &opts, h, w);
                    match mode {
                        PoolMode::Max => {
                            let mut best = base + y0 * w + x0;
                            for iy in y0..y1 {
                                for i in base + iy * w + x0..base + iy * w + x1 {
                                    if x[i] > x[best] {
                                        best = i;
                                    }
                                }
                            }
                            out.push(x[best]);
                            route.push(best);
                        }
                        PoolMode::Avg => {
                            let mut acc = 0.0f64;
                            for iy in y0..y1 {
                                for v in &x[base + iy * w + x0..base + iy * w + x1] {
                                    acc += v.widen();
                                }
                            }
                            let count = (y1 - y0) * (x1 - x0);
                            out.push(T::lift(acc / count as f64));
                            route.push(count);
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(
            value,
            Op::Pool2d(PoolNode {
                input,
                mode,
                in_shape: [n, c, h, w],
                route,
                opts,
                out_hw: (oh, ow),
            }),
            &[input],
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Conv2dOptions;

    fn pool(x: Tensor<f64>, mode: PoolMode, opts: Pool2dOptions) -> Tensor<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(x);
        let y = tape.pool2d(x, mode, opts).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn single_window_max_and_mean() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let o = Pool2dOptions::new(2, 2, 0);
        assert_eq!(pool(x.clone(), PoolMode::Max, o).data(), &[4.0]);
        assert_eq!(pool(x, PoolMode::Avg, o).data(), &[2.5]);
        let x = Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(pool(x.clone(), PoolMode::Max, o).data(), &[1.0]);
        assert_eq!(pool(x, PoolMode::Avg, o).data(), &[0.5]);
    }

    #[test]
    fn constant_input_is_invariant() {
        let x = Tensor::full(vec![2, 3, 6, 6], 7.0);
        for mode in [PoolMode::Max, PoolMode::Avg] {
            for opts in [Pool2dOptions::new(2, 2, 0), Pool2dOptions::new(3, 1, 1)] {
                assert!(pool(x.clone(), mode, opts).data().iter().all(|&v| v == 7.0));
            }
        }
    }

    #[test]
    fn oversized_window_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 1, 2, 3]));
        assert!(tape.pool2d(x, PoolMode::Max, Pool2dOptions::new(3, 1, 0)).is_err());
    }

    #[test]
    fn max_gradient_goes_to_first_maximum() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![1, 1, 2, 2], vec![5.0, 5.0, 1.0, 5.0]).unwrap());
        let y = tape.pool2d(x, PoolMode::Max, Pool2dOptions::new(2, 2, 0)).unwrap();
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn average_pool_equals_uniform_kernel_conv() {
        let x = Tensor::from_fn(vec![2, 3, 7, 7], |i| ((i * 31 % 29) as f64 - 14.0) / 3.0);
        for (w, s) in [(2, 2), (3, 1), (3, 2)] {
            let pooled = pool(x.clone(), PoolMode::Avg, Pool2dOptions::new(w, s, 0));
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let k = tape.constant(Tensor::full(vec![3, 1, w, w], 1.0 / (w * w) as f64));
            let y = tape.conv2d(xv, k, None, Conv2dOptions::new(s, 0).groups(3)).unwrap();
            assert!(pooled.max_abs_diff(tape.value(y)) < 1e-6);
        }
    }
}
