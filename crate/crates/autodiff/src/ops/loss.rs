use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::tape::{Backward, Tape, Var};
use crate::tensor::Tensor;

struct SoftmaxXentOp<T> {
    probs: Vec<T>,
    labels: Vec<usize>,
    classes: usize,
}

impl<T: Float> Backward<T> for SoftmaxXentOp<T> {
    fn name(&self) -> &'static str {
        "softmax_cross_entropy"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let scale = g[0] / T::cst(self.labels.len() as f64);
        let mut out: Vec<T> = self.probs.iter().map(|&p| p * scale).collect();
        for (n, &y) in self.labels.iter().enumerate() {
            out[n * self.classes + y] -= scale;
        }
        vec![Some(out)]
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Float>(logits: &[T], classes: usize) -> Vec<T> {
    let mut out = logits.to_vec();
    for row in out.chunks_exact_mut(classes) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

impl<T: Float> Tape<T> {
    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(TensorError::dim("softmax_cross_entropy", format!("logits {s:?} with {} labels", labels.len())));
        }
        let classes = s[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(TensorError::Index { op: "softmax_cross_entropy", index: bad, bound: classes });
        }
        let x = self.value(logits).data();
        let mut loss = T::zero();
        for (row, &y) in x.chunks_exact(classes).zip(labels) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            loss += lse - row[y];
        }
        loss /= T::cst(labels.len() as f64);
        let probs = softmax_rows(x, classes);
        Ok(self.record(Tensor::scalar(loss), vec![logits], SoftmaxXentOp { probs, labels: labels.to_vec(), classes }))
    }
}
