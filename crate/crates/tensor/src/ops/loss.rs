use crate::tape::{GradSink, Op};
use crate::{Element, Result, Tape, Tensor, TensorError, Var};

pub(crate) struct CrossEntropyNode<T> {
    logits: Var,
    labels: Vec<usize>,
    weights: Option<Vec<f64>>,
    probs: Vec<T>,
    classes: usize,
}

impl<T: Element> CrossEntropyNode<T> {
    pub fn backward(&self, grad: &[T], sink: &mut GradSink<'_, T>) -> Result<()> {
        if !sink.wants(self.logits) {
            return Ok(());
        }
        let k = self.classes;
        let n = self.labels.len();
        let g = grad[0].widen() / n as f64;
        let dx = sink.slot(self.logits);
        for (r, &y) in self.labels.iter().enumerate() {
            let w = self.weights.as_ref().map_or(1.0, |w| w[y]);
            for c in 0..k {
                let onehot = if c == y { 1.0 } else { 0.0 };
                let i = r * k + c;
                dx[i] = dx[i] + T::lift(g * w * (self.probs[i].widen() - onehot));
            }
        }
        Ok(())
    }
}

impl<T: Element> Tape<T> {
    /// Mean over the batch of `−w_y · log softmax(logits)_y`, evaluated with
    /// log-sum-exp. `logits` is `[N, K]`; `weights` (length K) default to 1.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], weights: Option<&[f64]>) -> Result<Var> {
        const OP: &str = "cross_entropy";
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::shape(OP, &shape, "logits must be [N, K]"));
        }
        let (n, k) = (shape[0], shape[1]);
        if labels.len() != n {
            return Err(TensorError::axis(OP, "label count", n, labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(TensorError::invalid(OP, format!("label {bad} outside 0..{k}")));
        }
        if let Some(w) = weights {
            if w.len() != k {
                return Err(TensorError::axis(OP, "class weight count", k, w.len()));
            }
        }
        let x = self.value(logits).data();
        let mut probs = Vec::with_capacity(n * k);
        let mut total = 0.0f64;
        for (r, &y) in labels.iter().enumerate() {
            let row = &x[r * k..(r + 1) * k];
            let max = row.iter().map(|v| v.widen()).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v.widen() - max).exp()).sum::<f64>().ln();
            for v in row {
                probs.push(T::lift((v.widen() - lse).exp()));
            }
            let w = weights.map_or(1.0, |w| w[y]);
            total += w * (lse - row[y].widen());
        }
        let value = Tensor::scalar(T::lift(total / n as f64));
        Ok(self.push(
            value,
            Op::CrossEntropy(CrossEntropyNode {
                logits,
                labels: labels.to_vec(),
                weights: weights.map(|w| w.to_vec()),
                probs,
                classes: k,
            }),
            &[logits],
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ce(logits: Vec<f64>, k: usize, labels: &[usize], w: Option<&[f64]>) -> f64 {
        let mut tape = Tape::new();
        let n = logits.len() / k;
        let x = tape.constant(Tensor::new(vec![n, k], logits).unwrap());
        let l = tape.cross_entropy(x, labels, w).unwrap();
        tape.value(l).item().unwrap()
    }

    #[test]
    fn confident_correct_prediction_has_zero_loss() {
        assert!(ce(vec![0.0, 800.0, 0.0], 3, &[1], None).abs() < 1e-12);
    }

    #[test]
    fn uniform_four_class_loss_is_ln_four() {
        assert!((ce(vec![0.0; 8], 4, &[0, 3], None) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn doubling_weights_doubles_loss() {
        let logits = vec![0.3, -1.2, 2.0, 0.1, 0.5, -0.4];
        let base = ce(logits.clone(), 3, &[2, 0], Some(&[1.0, 0.5, 2.0]));
        let doubled = ce(logits, 3, &[2, 0], Some(&[2.0, 1.0, 4.0]));
        assert!((doubled - 2.0 * base).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 2]));
        assert!(tape.cross_entropy(x, &[2], None).is_err());
    }
}
