use crate::error::{Result, TensorError};
use crate::float::{gemm, Float, MatRef};
use crate::flops;
use crate::tape::{Backward, Tape, Var};
use crate::tensor::Tensor;

struct MatMulOp {
    m: usize,
    k: usize,
    n: usize,
}

impl<T: Float> Backward<T> for MatMulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let (a, b) = (x[0].data(), x[1].data());
        // dA = dY * B^T, dB = A^T * dY
        let da = needs[0].then(|| {
            let mut da = vec![T::zero(); m * k];
            gemm(MatRef::new(g, m, n), MatRef::transposed(b, n, k), T::zero(), &mut da);
            da
        });
        let db = needs[1].then(|| {
            let mut db = vec![T::zero(); k * n];
            gemm(MatRef::transposed(a, k, m), MatRef::new(g, m, n), T::zero(), &mut db);
            db
        });
        vec![da, db]
    }
}

impl<T: Float> Tape<T> {
    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::dim("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(MatRef::new(self.value(a).data(), m, k), MatRef::new(self.value(b).data(), k, n), T::zero(), &mut out);
        flops::record(flops::Kind::MatMul, 2 * m * k * n);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.record(out, vec![a, b], MatMulOp { m, k, n }))
    }
}
