//! Layer normalization over the trailing axis and batch normalization over
//! `(N, H, W)` per channel.

use crate::tape::{GradSink, Op};
use crate::{numel, Element, Result, Tape, Tensor, TensorError, Var};

pub const NORM_EPS: f64 = 1e-5;

pub(crate) struct LayerNormNode<T> {
    input: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<T>,
    inv_std: Vec<f64>,
    dim: usize,
}

/// Shared backward for normalization over index groups:
/// `dx = inv_std · (dxhat − mean(dxhat) − xhat · mean(dxhat · xhat))`.
fn normalize_backward(dxhat: &[f64], xhat: &[f64], inv_std: f64, dx: &mut [f64]) {
    let m = dxhat.len() as f64;
    let mean_d: f64 = dxhat.iter().sum::<f64>() / m;
    let mean_dx: f64 = dxhat.iter().zip(xhat).map(|(d, x)| d * x).sum::<f64>() / m;
    for i in 0..dxhat.len() {
        dx[i] = inv_std * (dxhat[i] - mean_d - xhat[i] * mean_dx);
    }
}

impl<T: Element> LayerNormNode<T> {
    pub fn backward(&self, grad: &[T], sink: &mut GradSink<'_, T>) -> Result<()> {
        let d = self.dim;
        let rows = grad.len() / d;
        if sink.wants(self.gamma) || sink.wants(self.beta) {
            let mut dg = vec![0.0f64; d];
            let mut db = vec![0.0f64; d];
            for r in 0..rows {
                for j in 0..d {
                    let g = grad[r * d + j].widen();
                    dg[j] += g * self.xhat[r * d + j].widen();
                    db[j] += g;
                }
            }
            let dg: Vec<T> = dg.into_iter().map(T::lift).collect();
            let db: Vec<T> = db.into_iter().map(T::lift).collect();
            sink.add(self.gamma, &dg);
            sink.add(self.beta, &db);
        }
        if sink.wants(self.input) {
            let gamma = sink.value(self.gamma).data();
            let mut dxhat = vec![0.0; d];
            let mut xh = vec![0.0; d];
            let mut dxr = vec![0.0; d];
            let dx = sink.slot(self.input);
            for r in 0..rows {
                for j in 0..d {
                    dxhat[j] = grad[r * d + j].widen() * gamma[j].widen();
                    xh[j] = self.xhat[r * d + j].widen();
                }
                normalize_backward(&dxhat, &xh, self.inv_std[r], &mut dxr);
                for j in 0..d {
                    dx[r * d + j] = dx[r * d + j] + T::lift(dxr[j]);
                }
            }
        }
        Ok(())
    }
}

/// Per-channel batch statistics from a training-mode batch norm, used by the
/// caller to update running estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    /// Population variance (divisor `count`).
    pub var: Vec<f64>,
    pub count: usize,
}

pub(crate) struct BatchNormNode<T> {
    input: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<T>,
    inv_std: Vec<f64>,
    shape: [usize; 3],
    train: bool,
}

impl<T: Element> BatchNormNode<T> {
    pub fn backward(&self, grad: &[T], sink: &mut GradSink<'_, T>) -> Result<()> {
        let [n, c, hw] = self.shape;
        let idx = |b: usize, ch: usize, p: usize| (b * c + ch) * hw + p;
        if sink.wants(self.gamma) || sink.wants(self.beta) {
            let mut dg = vec![0.0f64; c];
            let mut db = vec![0.0f64; c];
            for b in 0..n {
                for ch in 0..c {
                    for p in 0..hw {
                        let g = grad[idx(b, ch, p)].widen();
                        dg[ch] += g * self.xhat[idx(b, ch, p)].widen();
                        db[ch] += g;
                    }
                }
            }
            let dg: Vec<T> = dg.into_iter().map(T::lift).collect();
            let db: Vec<T> = db.into_iter().map(T::lift).collect();
            sink.add(self.gamma, &dg);
            sink.add(self.beta, &db);
        }
        if sink.wants(self.input) {
            let gamma: Vec<f64> = sink.value(self.gamma).data().iter().map(|v| v.widen()).collect();
            let dx = sink.slot(self.input);
            let m = n * hw;
            let mut dxhat = vec![0.0; m];
            let mut xh = vec![0.0; m];
            let mut dxc = vec![0.0; m];
            for ch in 0..c {
                let mut k = 0;
                for b in 0..n {
                    for p in 0..hw {
                        dxhat[k] = grad[idx(b, ch, p)].widen() * gamma[ch];
                        xh[k] = self.xhat[idx(b, ch, p)].widen();
                        k += 1;
                    }
                }
                if self.train {
                    normalize_backward(&dxhat, &xh, self.inv_std[ch], &mut dxc);
                } else {
                    for k in 0..m {
                        dxc[k] = dxhat[k] * self.inv_std[ch];
                    }
                }
                let mut k = 0;
                for b in 0..n {
                    for p in 0..hw {
                        let i = idx(b, ch, p);
                        dx[i] = dx[i] + T::lift(dxc[k]);
                        k += 1;
                    }
                }
            }
        }
        Ok(())
    }
}

fn check_affine<T: Element>(tape: &Tape<T>, op: &'static str, gamma: Var, beta: Var, dim: usize) -> Result<()> {
    for (name, v) in [("scale", gamma), ("shift", beta)] {
        if tape.shape(v) != [dim] {
            return Err(TensorError::axis(op, format!("{name} length"), dim, numel(tape.shape(v))));
        }
    }
    Ok(())
}

impl<T: Element> Tape<T> {
    /// Normalizes each trailing-axis vector to zero mean and unit variance,
    /// then applies `gamma · x̂ + beta`.
    pub fn layer_norm(&mut self, input: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| TensorError::invalid("layer_norm", "scalar input"))?;
        check_affine(self, "layer_norm", gamma, beta, d)?;
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = x.len() / d;
        let mut xhat = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len());
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().map(|v| v.widen()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.widen() - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let xh = (row[j].widen() - mean) * is;
                xhat.push(T::lift(xh));
                out.push(T::lift(xh * g[j].widen() + b[j].widen()));
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm(LayerNormNode {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                dim: d,
            }),
            &[input, gamma, beta],
        ))
    }

    /// Batch normalization of `[N, C, ...]` per channel.
    ///
    /// In training mode the batch statistics are used and returned so the
    /// caller can update its running estimates; training requires `N ≥ 2`.
    /// In inference mode `running` supplies `(mean, var)`.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: (&[T], &[T]),
        train: bool,
    ) -> Result<(Var, Option<BatchNormStats>)> {
        const OP: &str = "batch_norm";
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::shape(OP, &shape, "expected [N, C, ...]"));
        }
        let (n, c) = (shape[0], shape[1]);
        let hw = numel(&shape[2..]);
        check_affine(self, OP, gamma, beta, c)?;
        if running.0.len() != c || running.1.len() != c {
            return Err(TensorError::axis(OP, "running statistics length", c, running.0.len()));
        }
        if train && n < 2 {
            return Err(TensorError::invalid(OP, format!("training mode needs a batch of at least 2, got {n}")));
        }
        let x = self.value(input).data();
        let idx = |b: usize, ch: usize, p: usize| (b * c + ch) * hw + p;
        let (mean, var): (Vec<f64>, Vec<f64>) = if train {
            (0..c)
                .map(|ch| {
                    let m = (n * hw) as f64;
                    let mut s = 0.0;
                    for b in 0..n {
                        for p in 0..hw {
                            s += x[idx(b, ch, p)].widen();
                        }
                    }
                    let mean = s / m;
                    let mut v = 0.0;
                    for b in 0..n {
                        for p in 0..hw {
                            v += (x[idx(b, ch, p)].widen() - mean).powi(2);
                        }
                    }
                    (mean, v / m)
                })
                .unzip()
        } else {
            (
                running.0.iter().map(|v| v.widen()).collect(),
                running.1.iter().map(|v| v.widen()).collect(),
            )
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    let i = idx(b, ch, p);
                    let xh = (x[i].widen() - mean[ch]) * inv_std[ch];
                    xhat[i] = T::lift(xh);
                    out[i] = T::lift(xh * g[ch].widen() + bt[ch].widen());
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let stats = train.then(|| BatchNormStats {
            mean,
            var,
            count: n * hw,
        });
        let v = self.push(
            value,
            Op::BatchNorm(BatchNormNode {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                shape: [n, c, hw],
                train,
            }),
            &[input, gamma, beta],
        );
        Ok((v, stats))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(vec![3, 5], 4.2));
        let g = tape.constant(Tensor::ones(vec![5]));
        let b = tape.constant(Tensor::zeros(vec![5]));
        let y = tape.layer_norm(x, g, b).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(vec![4, 8], |i| ((i * 13 % 7) as f64) * 1.7 - 2.0));
        let g = tape.constant(Tensor::ones(vec![8]));
        let b = tape.constant(Tensor::zeros(vec![8]));
        let y = tape.layer_norm(x, g, b).unwrap();
        for row in tape.value(y).data().chunks(8) {
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn batch_norm_two_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![2, 1, 1, 1], vec![1.0, 3.0]).unwrap());
        let g = tape.constant(Tensor::ones(vec![1]));
        let b = tape.constant(Tensor::zeros(vec![1]));
        let (y, stats) = tape.batch_norm(x, g, b, (&[0.0], &[1.0]), true).unwrap();
        let s = 1.0 / (1.0f64 + 1e-5).sqrt();
        let y = tape.value(y).data();
        assert!((y[0] + s).abs() < 1e-12 && (y[1] - s).abs() < 1e-12);
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![2.0]);
        assert_eq!(stats.var, vec![1.0]);
    }

    #[test]
    fn batch_norm_rejects_single_sample_training() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 2, 3, 3]));
        let g = tape.constant(Tensor::ones(vec![2]));
        let b = tape.constant(Tensor::zeros(vec![2]));
        assert!(tape.batch_norm(x, g, b, (&[0.0; 2], &[1.0; 2]), true).is_err());
        assert!(tape.batch_norm(x, g, b, (&[0.0; 2], &[1.0; 2]), false).is_ok());
    }

    #[test]
    fn batch_norm_eval_uses_running_statistics() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 1, 2], vec![3.0, 5.0]).unwrap());
        let g = tape.constant(Tensor::full(vec![1], 2.0));
        let b = tape.constant(Tensor::full(vec![1], 1.0));
        let (y, stats) = tape.batch_norm(x, g, b, (&[1.0], &[4.0 - 1e-5]), false).unwrap();
        assert!(stats.is_none());
        let y = tape.value(y).data();
        assert!((y[0] - 3.0).abs() < 1e-12 && (y[1] - 5.0).abs() < 1e-12);
    }
}
